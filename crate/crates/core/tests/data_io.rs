use std::fs;
use std::path::Path;

use dat_core::data::{
    decode_matrix, encode_matrix, load_session, load_sessions, partner_aggregate, read_matrix, save_session,
    synth_session, write_matrix, Role, SynthConfig,
};
use dat_core::features::{FeatureBundle, FeatureDims, Stream};
use dat_core::{DatError, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        sessions: 2,
        frames: 60,
        seed,
        feature_dims: FeatureDims {
            opensmile: 3,
            w2vbert: 5,
            clip: 4,
            openface: 2,
            openpose: 6,
        },
        ..SynthConfig::default()
    }
}

fn f32_matrix() -> impl Strategy<Value = Tensor> {
    (0usize..12, 1usize..12).prop_flat_map(|(r, c)| {
        proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), r * c)
            .prop_map(move |v| Tensor::new(vec![r, c], v.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn datf_round_trip_is_bitwise(m in f32_matrix()) {
        let bytes = encode_matrix(&m).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * m.numel());
        let back = decode_matrix(&bytes, Path::new("m.datf")).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in back.data().iter().zip(m.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(encode_matrix(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_reported_at_the_file_end(m in f32_matrix(), cut in 1usize..8) {
        let bytes = encode_matrix(&m).unwrap();
        let cut = cut.min(bytes.len());
        let short = &bytes[..bytes.len() - cut];
        match decode_matrix(short, Path::new("m.datf")) {
            Err(DatError::Format { offset, .. }) => prop_assert_eq!(offset as usize, short.len()),
            other => prop_assert!(false, "expected format error, got {:?}", other),
        }
    }
}

#[test]
fn datf_layout() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.datf");
    write_matrix(&p, &Tensor::zeros(&[0, 7])).unwrap();
    assert_eq!(fs::metadata(&p).unwrap().len(), 16);
    assert_eq!(read_matrix(&p).unwrap().shape(), &[0, 7]);
    let m = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.5]]).unwrap();
    write_matrix(&p, &m).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(bytes.len(), 40);
    assert_eq!(&bytes[..4], &[0x44, 0x41, 0x54, 0x46]);
    assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
    assert_eq!(&bytes[36..40], &6.5f32.to_le_bytes());
    assert_eq!(read_matrix(&p).unwrap(), m);
}

#[test]
fn random_feature_block_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Tensor::randn(&[96, 88], 1.0, &mut rng);
    let bytes = encode_matrix(&m).unwrap();
    let back = decode_matrix(&bytes, Path::new("x")).unwrap();
    for (a, b) in back.data().iter().zip(m.data()) {
        assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
    }
}

#[test]
fn session_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_session(&small(3), 1).unwrap();
    save_session(&dir.path().join("s1"), &s).unwrap();
    let back = load_session(&dir.path().join("s1")).unwrap();
    assert_eq!(back, s);
    for stem in ["opensmile", "w2vbert", "clip", "openface", "openpose", "labels"] {
        assert!(dir.path().join("s1/target").join(format!("{stem}.datf")).exists());
        assert!(dir.path().join("s1/partner").join(format!("{stem}.datf")).exists());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s1/manifest.json")).unwrap()).unwrap();
    for key in ["schema_version", "session_id", "frame_rate_hz", "num_frames", "feature_dims", "roles"] {
        assert!(manifest.get(key).is_some(), "{key}");
    }
    save_session(&dir.path().join("s0"), &synth_session(&small(3), 0).unwrap()).unwrap();
    let all = load_sessions(dir.path()).unwrap();
    assert_eq!(all.iter().map(|s| s.session_id.as_str()).collect::<Vec<_>>(), ["synth_0000", "synth_0001"]);
}

fn saved(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("s");
    save_session(&p, &synth_session(&small(4), 0).unwrap()).unwrap();
    p
}

#[test]
fn out_of_range_label_names_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let p = saved(dir.path());
    let lp = p.join("target/labels.datf");
    let mut labels = read_matrix(&lp).unwrap();
    labels.data_mut()[17] = 1.5;
    write_matrix(&lp, &labels).unwrap();
    let e = load_session(&p).unwrap_err();
    assert!(e.is_data(), "{e}");
    assert!(e.to_string().contains("frame 17"), "{e}");
}

#[test]
fn short_stream_names_the_stream() {
    let dir = tempfile::tempdir().unwrap();
    let p = saved(dir.path());
    let sp = p.join("partner/openface.datf");
    let m = read_matrix(&sp).unwrap();
    write_matrix(&sp, &m.slice_rows(0, m.rows() - 1)).unwrap();
    let e = load_session(&p).unwrap_err();
    assert!(e.to_string().contains("partner/openface"), "{e}");
}

#[test]
fn missing_stream_and_bad_dims() {
    let dir = tempfile::tempdir().unwrap();
    let p = saved(dir.path());
    fs::remove_file(p.join("target/clip.datf")).unwrap();
    assert!(load_session(&p).unwrap_err().to_string().contains("clip"));

    let p = saved(&dir.path().join("again"));
    write_matrix(&p.join("target/w2vbert.datf"), &Tensor::zeros(&[60, 9])).unwrap();
    assert!(load_session(&p).unwrap_err().to_string().contains("dim 9"));

    let p = saved(&dir.path().join("third"));
    fs::write(p.join("target/opensmile.datf"), b"NOPE0000000000000000").unwrap();
    assert!(matches!(load_session(&p), Err(DatError::Format { offset: 0, .. })));
}

#[test]
fn generator_is_deterministic_per_seed_and_index() {
    let a = synth_session(&small(9), 2).unwrap();
    assert_eq!(a, synth_session(&small(9), 2).unwrap());
    assert_ne!(a, synth_session(&small(9), 3).unwrap());
    assert_ne!(a, synth_session(&small(10), 2).unwrap());
}

#[test]
fn quantized_labels_sit_on_the_25_level_lattice() {
    let cfg = SynthConfig {
        quantize_levels: 25,
        ..small(5)
    };
    let s = synth_session(&cfg, 0).unwrap();
    for v in s.labels().unwrap() {
        let k = v * 24.0;
        assert!((k - k.round()).abs() < 1e-5, "{v}");
        assert!((0.0..=1.0).contains(v));
    }
}

/// Least squares from noiseless features back to the label recovers it to
/// float32 storage precision.
#[test]
fn latent_is_linearly_recoverable() {
    let cfg = SynthConfig {
        obs_noise: 0.0,
        frames: 400,
        ..small(6)
    };
    let s = synth_session(&cfg, 0).unwrap();
    for role in [Role::Target, Role::Partner] {
        let data = s.role(role).unwrap();
        let labels = data.labels.as_ref().unwrap();
        let t = s.num_frames();
        let cols = cfg.feature_dims.total() + 1;
        let x = DMatrix::from_fn(t, cols, |r, c| {
            let mut c = c;
            for st in Stream::ALL {
                let w = cfg.feature_dims.get(st);
                if c < w {
                    return data.features.get(st).get2(r, c);
                }
                c -= w;
            }
            1.0
        });
        let y = DVector::from_column_slice(labels);
        let beta = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let resid = &x * beta - &y;
        let mse = resid.norm_squared() / t as f64;
        assert!(mse < 1e-8, "{role:?}: {mse}");
    }
}

#[test]
fn partner_aggregation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = FeatureDims::uniform(3);
    let a = FeatureBundle::new(Stream::ALL.map(|s| Tensor::randn(&[5, dims.get(s)], 1.0, &mut rng))).unwrap();
    assert_eq!(partner_aggregate(&[a.clone()]).unwrap(), a);
    assert_eq!(partner_aggregate(&[a.clone(), a.clone()]).unwrap(), a);
    let mut neg = a.clone();
    for s in Stream::ALL {
        neg.get_mut(s).data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    let z = partner_aggregate(&[a.clone(), neg]).unwrap();
    assert!(Stream::ALL.iter().all(|s| z.get(*s).data().iter().all(|v| *v == 0.0)));
    let short = FeatureBundle::zeros(4, &dims);
    assert!(partner_aggregate(&[a, short]).is_err());
    assert!(partner_aggregate(&[]).is_err());
}
