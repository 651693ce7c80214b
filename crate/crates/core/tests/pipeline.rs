use pcreg::estimator::register_pair;
use pcreg::geom::PointCloud;
use pcreg::io::{read_points, write_ply, write_xyz};
use pcreg::pipeline::{toy_dataset, train_toy, ModelConfig};
use pcreg::Error;

#[test]
fn point_files_round_trip_bit_exactly() {
    let pair = &toy_dataset(1, 4).unwrap()[0];
    let dir = tempfile::tempdir().unwrap();
    for name in ["c.xyz", "c.ply"] {
        let path = dir.path().join(name);
        if name.ends_with(".ply") {
            write_ply(&path, &pair.src).unwrap();
        } else {
            write_xyz(&path, &pair.src).unwrap();
        }
        assert_eq!(read_points(&path).unwrap().points(), pair.src.points());
    }
}

#[test]
fn trained_toy_model_registers_deterministically() {
    let data = toy_dataset(4, 3).unwrap();
    let cfg = ModelConfig { seed: 3, ..ModelConfig::toy() };
    let (model, params, report) = train_toy(&data, &cfg, 12).unwrap();
    assert_eq!(report.losses.len(), 12);
    let p = &data[1];
    let (a, da) = register_pair(&p.src, &p.tgt, &model, &params).unwrap();
    let (b, _) = register_pair(&p.src, &p.tgt, &model, &params).unwrap();
    assert_eq!(a, b);
    assert!(a.rotation.iter().chain(a.translation.iter()).all(|v| v.is_finite()));
    assert_eq!(da.mode, "learned");
    assert_eq!(da.counts.src_points, p.src.len());
}

#[test]
fn too_small_clouds_are_rejected_before_the_network() {
    let cfg = ModelConfig::toy();
    let (model, params) = pcreg::pipeline::Model::init(&cfg).unwrap();
    let tiny = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
    let err = register_pair(&tiny, &tiny, &model, &params).unwrap_err();
    assert!(matches!(err, Error::TooFewPoints { .. }), "{err}");
}
