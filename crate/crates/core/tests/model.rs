use hoiu::model::{read_checkpoint, write_checkpoint, Checkpoint, FeatureMap, Model, ModelConfig};
use hoiu::scenegen::{generate, render, DifficultyProfile, Raster, Split};
use hoiu::tensor::{DiffArray, Tape};
use hoiu::uncertainty::predict;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn expected_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let lin = |i: usize, o: usize| i * o + o;
    let mut n = 0;
    let mut c_in = 3;
    for &c_out in c.stem_channels.iter().chain(std::iter::once(&d)) {
        n += lin(9 * c_in, c_out);
        c_in = c_out;
    }
    let attn = 4 * lin(d, d);
    let norm = 2 * d;
    let ffn = lin(d, c.ffn_dim) + lin(c.ffn_dim, d);
    n += c.encoder_layers * (attn + 2 * norm + ffn);
    n += 2 * (c.num_queries * d + c.decoder_layers * (2 * attn + 3 * norm + ffn));
    let mlp = |o: usize| lin(d, d) + lin(d, o);
    n += mlp(2) + mlp(c.num_object_classes + 1) + 2 * (mlp(6) + mlp(4));
    let verb = c.ffn_head_depth * lin(d, d) + lin(d, c.num_verbs + 1);
    n += if c.additional_classifier { 2 * verb } else { verb };
    n
}

#[test]
fn parameter_count_follows_architecture() {
    for cfg in [
        ModelConfig::default(),
        ModelConfig::miniature(),
        ModelConfig {
            ffn_head_depth: 2,
            additional_classifier: true,
            ..ModelConfig::default()
        },
    ] {
        let m = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.params().scalar_count(), expected_params(&cfg));
    }
    assert_eq!(Model::new(ModelConfig::default(), 0).unwrap().params().scalar_count(), 324_102);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        },
        ModelConfig {
            num_queries: 0,
            ..ModelConfig::default()
        },
        ModelConfig {
            dropout_rate: 1.0,
            ..ModelConfig::default()
        },
        ModelConfig {
            ffn_head_depth: 3,
            ..ModelConfig::default()
        },
    ];
    for cfg in bad {
        assert!(Model::new(cfg, 0).is_err());
    }
}

fn scene_raster(size: usize, seed: u64) -> Raster {
    let r = &generate(seed, 1, &DifficultyProfile::default(), Split::Test).unwrap()[0];
    render(r, size)
}

#[test]
fn predictions_are_distributions_with_positive_variances() {
    let model = Model::new(ModelConfig::default(), 3).unwrap();
    for seed in 0..3 {
        let preds = predict(&model, &scene_raster(64, seed), 5, seed).unwrap();
        assert_eq!(preds.len(), model.config().num_queries);
        for p in &preds {
            for probs in [&p.human_probs, &p.object_probs, &p.verb_probs] {
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
            assert!(p.box_gauss_h.var.iter().chain(&p.box_gauss_o.var).all(|&v| v > 0.0));
            assert!(p.inter_var >= 0.0 && p.inter_var.is_finite());
        }
    }
}

#[test]
fn forward_pass_is_deterministic() {
    let raster = scene_raster(64, 9);
    let a = predict(&Model::new(ModelConfig::default(), 5).unwrap(), &raster, 5, 1).unwrap();
    let b = predict(&Model::new(ModelConfig::default(), 5).unwrap(), &raster, 5, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_image_gives_finite_features() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let raster = Raster {
        size: 64,
        data: vec![0.0; 64 * 64 * 3],
    };
    let mut t = Tape::new(0);
    let p = model.bind(&mut t, false);
    let img = model.image(&mut t, &raster).unwrap();
    let f = model.stem(&mut t, &p, img).unwrap();
    assert_eq!(f.grid, 8);
    assert_eq!(t.shape(f.tokens), &[64, 64]);
    assert!(t.data(f.tokens).iter().all(|x| x.is_finite()));
}

#[test]
fn wrong_image_size_is_rejected() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let mut t = Tape::new(0);
    assert!(model.image(&mut t, &scene_raster(32, 0)).is_err());
}

#[test]
fn attention_rows_sum_to_one() {
    let model = Model::new(ModelConfig::default(), 2).unwrap();
    let mut t = Tape::new(0);
    let p = model.bind(&mut t, false);
    let img = model.image(&mut t, &scene_raster(64, 4)).unwrap();
    let f = model.stem(&mut t, &p, img).unwrap();
    let pos = t.constant(model.positional().clone());
    let enc = model.encode(&mut t, &p, &f, pos).unwrap();
    let dec = model.decode_loc(&mut t, &p, &enc).unwrap();
    let all = enc.attention.iter().chain(&dec.self_attention).chain(&dec.cross_attention);
    for &w in all {
        let a = t.value(w);
        for i in 0..a.rows() {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_token_attention_is_one() {
    let model = Model::new(ModelConfig::default(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = Tape::new(0);
    let p = model.bind(&mut t, false);
    let tokens = t.constant(random(&mut rng, &[1, 64]));
    let pos = t.constant(random(&mut rng, &[1, 64]));
    let enc = model.encode(&mut t, &p, &FeatureMap { tokens, grid: 1 }, pos).unwrap();
    for &w in &enc.attention {
        assert_eq!(t.data(w), &[1.0]);
    }
}

#[test]
fn encoder_is_permutation_equivariant() {
    let model = Model::new(ModelConfig::default(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10;
    let x = random(&mut rng, &[n, 64]);
    let pos = random(&mut rng, &[n, 64]);
    let perm: Vec<usize> = (0..n).rev().collect();
    let permute = |a: &DiffArray| {
        let data = perm.iter().flat_map(|&i| a.row(i).to_vec()).collect();
        DiffArray::new(vec![n, 64], data).unwrap()
    };
    let run = |x: DiffArray, pos: DiffArray| {
        let mut t = Tape::new(0);
        let p = model.bind(&mut t, false);
        let tokens = t.constant(x);
        let pos = t.constant(pos);
        let enc = model.encode(&mut t, &p, &FeatureMap { tokens, grid: 0 }, pos).unwrap();
        t.value(enc.tokens).clone()
    };
    let a = permute(&run(x.clone(), pos.clone()));
    let b = run(permute(&x), permute(&pos));
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn encoder_output_is_finite_over_many_seeds() {
    let model = Model::new(ModelConfig::miniature(), 0).unwrap();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new(seed);
        let p = model.bind(&mut t, false);
        let big = random(&mut rng, &[16, 8]).data().iter().map(|v| v * 10.0).collect();
        let tokens = t.constant(DiffArray::new(vec![16, 8], big).unwrap());
        let pos = t.constant(random(&mut rng, &[16, 8]));
        let enc = model.encode(&mut t, &p, &FeatureMap { tokens, grid: 4 }, pos).unwrap();
        assert!(t.data(enc.tokens).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn query_sets_have_equal_size() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let a = model.params().get("loc.queries").unwrap();
    let b = model.params().get("inter.queries").unwrap();
    assert_eq!(a.shape, b.shape);
    assert_eq!(a.shape, vec![8, 64]);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = ModelConfig {
        additional_classifier: true,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, 11).unwrap();
    let ckpt = model.to_checkpoint(serde_json::json!({ "note": "x" }));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &ckpt).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let restored = Model::from_checkpoint(&back).unwrap();
    assert_eq!(restored.config(), model.config());
    for (a, b) in restored.params().iter().zip(model.params().iter()) {
        assert_eq!(a.name, b.name);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.data), bits(&b.data));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = Model::new(ModelConfig::miniature(), 0).unwrap();
    let bytes = model.to_checkpoint(serde_json::Value::Null).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&[]).is_err());
}
