use fmuda::core::synthdata::LabelMap;
use fmuda::core::{NetConfig, Raster, SegModel};
use fmuda::error::Error;
use fmuda::{checkpoint, ndr};

#[test]
fn raster_and_mask_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = Raster::new(2, vec![3, 2], vec![0.5, -1.0, f64::MAX, 1e-300, 0.0, -0.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
    let mask = LabelMap::new(vec![3, 2], vec![0, 1, 1, 0, 2, 1]).unwrap();
    let (ip, mp) = (dir.path().join("a/img.ndr"), dir.path().join("a/mask.ndr"));
    ndr::write_raster(&ip, &img).unwrap();
    ndr::write_mask(&mp, &mask).unwrap();
    let back = ndr::read_raster(&ip).unwrap();
    assert_eq!(back.channels(), 2);
    assert_eq!(back.dims(), [3, 2]);
    assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(ndr::read_mask(&mp).unwrap(), mask);
    assert_eq!(std::fs::metadata(&mp).unwrap().len() as usize, ndr::header_len(2) + 6);
}

#[test]
fn truncated_file_names_path_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("img.ndr");
    ndr::write_raster(&p, &Raster::new(1, vec![2, 2], vec![1.0; 4]).unwrap()).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&p, &bytes).unwrap();
    match ndr::read_raster(&p) {
        Err(Error::Format { path, offset, .. }) => {
            assert_eq!(path, p);
            assert_eq!(offset, bytes.len() as u64);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
    let msg = ndr::read_raster(&p).unwrap_err().to_string();
    assert!(msg.starts_with("[synthdata]"), "{msg}");
}

#[test]
fn mask_file_is_not_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mask.ndr");
    ndr::write_mask(&p, &LabelMap::new(vec![2, 2], vec![0, 1, 1, 0]).unwrap()).unwrap();
    assert!(ndr::read_raster(&p).is_err());
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let net = NetConfig { depth: 1, base_width: 3, latent_dim: 5, ..NetConfig::default() };
    let model = SegModel::new(net, 4).unwrap();
    checkpoint::save_model(&p, &model).unwrap();
    assert_eq!(checkpoint::load_model(&p, net).unwrap(), model);
    let first = std::fs::read(&p).unwrap();
    checkpoint::save_model(&p, &model).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let other = NetConfig { latent_dim: 6, ..net };
    let err = checkpoint::load_model(&p, other).unwrap_err().to_string();
    assert!(err.contains("shape mismatch"), "{err}");

    std::fs::write(&p, b"NOPE").unwrap();
    assert!(matches!(checkpoint::load_model(&p, net), Err(Error::Format { offset: 0, .. })));
}
