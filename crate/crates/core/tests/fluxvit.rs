mod common;

use flux_core::fluxvit::{
    attention_lpe, bind, embed_pool, forward, glpe, gradcheck_model, init_params, load_checkpoint, patch_embed_dpn,
    save_checkpoint, sincos_3d, FluxViTConfig, FluxViTParams,
};
use flux_core::sampling::{patchify, patchify_tensor, SamplingGrid, TokenPool};
use flux_core::selector::SelectionMask;
use flux_core::videogen::{gen_video, GenSpec};
use flux_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], amp: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-amp..amp))
}

/// Tiny params with every tensor perturbed, and a nonzero W_lpe.
fn busy_params(seed: u64) -> FluxViTParams {
    init_params(&FluxViTConfig::tiny(), seed).unwrap().perturbed(seed, 0.1)
}

fn with_zero_lpe(params: &FluxViTParams) -> FluxViTParams {
    let mut out = params.clone();
    for b in 0..out.config.depth {
        let t = out.set.get_mut(&format!("blocks.{b}.lpe")).unwrap();
        t.data_mut().fill(0.0);
    }
    out
}

fn run_attention(params: &FluxViTParams, x: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let xv = g.constant(x.clone());
    let out = attention_lpe(&mut g, &b, &params.config, 0, xv).unwrap();
    (g.value(out.out).clone(), out.attn.iter().map(|&a| g.value(a).clone()).collect())
}

/// 2 frames of 14×14 under patch 7: a 2×2×2 grid of 8 tokens.
fn eight_token_pool(seed: u64) -> TokenPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = SamplingGrid::new(2, 14, [1, 7, 7]);
    let clip = Tensor::from_fn(&[2, 14, 14, 3], |_| rng.random_range(0.0..1.0));
    patchify_tensor(&clip, &grid).unwrap()
}

fn run_forward(params: &FluxViTParams, pool: &TokenPool, mask: &SelectionMask) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let out = forward(&mut g, &b, &params.config, pool, mask).unwrap();
    (
        g.value(out.logits).data().to_vec(),
        g.value(out.features).data().to_vec(),
        out.cls_attn,
    )
}

#[test]
fn zero_value_projection_is_standard_attention() {
    let params = busy_params(1);
    let zero = with_zero_lpe(&params);
    let mut plain = zero.clone();
    plain.config.use_lpe = false;
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(2), &[5, 32], 1.0);
    let (a, _) = run_attention(&zero, &x);
    let (b, _) = run_attention(&plain, &x);
    assert_eq!(a.data(), b.data());
}

#[test]
fn single_token_closed_form() {
    let params = busy_params(3);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[1, 32], 1.0);
    let (out, attn) = run_attention(&params, &x);
    for a in &attn {
        assert_eq!(a.data(), &[1.0]);
    }
    // V(I + W) per head, then the output projection
    let p = |n: &str| params.tensor(n).unwrap();
    let xm = common::to_mat(&x);
    let qkv = common::add_row(&common::mm(&xm, &common::to_mat(p("blocks.0.qkv.weight"))), p("blocks.0.qkv.bias").data());
    let (d, hd) = (32, 16);
    let mut z = vec![0.0; d];
    for h in 0..2 {
        let v = &qkv[0][2 * d + h * hd..2 * d + (h + 1) * hd];
        for j in 0..hd {
            let w: f64 = (0..hd).map(|i| v[i] * p("blocks.0.lpe").data()[(h * hd + i) * hd + j]).sum();
            z[h * hd + j] = v[j] + w;
        }
    }
    let expect = common::add_row(&common::mm(&vec![z], &common::to_mat(p("blocks.0.proj.weight"))), p("blocks.0.proj.bias").data());
    assert!(common::max_abs_diff(out.data(), &expect[0]) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one() {
    let params = busy_params(5);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[9, 32], 2.0);
    let (_, attn) = run_attention(&params, &x);
    for a in attn {
        for i in 0..a.rows() {
            let row = a.row(i);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn value_projection_pathway_is_additive() {
    let params = busy_params(7);
    let zero = with_zero_lpe(&params);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(8), &[6, 32], 1.0);
    let (with, _) = run_attention(&params, &x);
    let (without, _) = run_attention(&zero, &x);
    // the extra term is (V_h W_h per head, concatenated) · W_proj
    let p = |n: &str| params.tensor(n).unwrap();
    let xm = common::to_mat(&x);
    let qkv = common::mm(&xm, &common::to_mat(p("blocks.0.qkv.weight")));
    let qkv = common::add_row(&qkv, p("blocks.0.qkv.bias").data());
    let mut extra = vec![vec![0.0; 32]; 6];
    for (r, row) in qkv.iter().enumerate() {
        for h in 0..2 {
            for j in 0..16 {
                extra[r][h * 16 + j] = (0..16)
                    .map(|i| row[64 + h * 16 + i] * p("blocks.0.lpe").data()[(h * 16 + i) * 16 + j])
                    .sum();
            }
        }
    }
    let extra = common::mm(&extra, &common::to_mat(p("blocks.0.proj.weight")));
    let predicted: Vec<f64> = common::add(&common::to_mat(&without), &extra).concat();
    assert!(common::max_abs_diff(with.data(), &predicted) < 1e-12);
}

#[test]
fn attention_matches_dense_reimplementation() {
    for seed in 0..5 {
        let params = busy_params(10 + seed);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(20 + seed), &[6, 32], 1.5);
        let (out, attn) = run_attention(&params, &x);
        let (dense, dense_attn) = common::attention(&params, 0, &common::to_mat(&x));
        assert!(common::max_abs_diff(out.data(), &dense.concat()) < 1e-12);
        for (a, b) in attn.iter().zip(&dense_attn) {
            assert!(common::max_abs_diff(a.data(), &b.concat()) < 1e-12);
        }
    }
}

#[test]
fn forward_matches_dense_reimplementation() {
    let pool = eight_token_pool(30);
    for seed in 0..3 {
        let params = busy_params(40 + seed);
        let (logits, feats, cls) = run_forward(&params, &pool, &SelectionMask::full(8));
        let dense = common::forward(&params, &pool, &(0..8).collect::<Vec<_>>());
        assert!(common::max_abs_diff(&logits, &dense.logits) < 1e-10);
        assert!(common::max_abs_diff(&feats, &dense.features) < 1e-10);
        assert!(common::max_abs_diff(&cls, &dense.cls_attn) < 1e-10);
    }
}

#[test]
fn forward_matches_dense_on_a_subset_at_max_grid() {
    // grid equal to the table: no resize
    let cfg = FluxViTConfig::tiny();
    let grid = SamplingGrid::new(12, 21, cfg.patch);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let clip = Tensor::from_fn(&[12, 21, 21, 3], |_| rng.random_range(0.0..1.0));
    let pool = patchify_tensor(&clip, &grid).unwrap();
    let indices: Vec<usize> = (0..pool.len()).filter(|i| i % 7 == 2).collect();
    let params = busy_params(51);
    let (logits, _, _) = run_forward(&params, &pool, &SelectionMask::ungrouped(indices.clone()));
    let dense = common::forward(&params, &pool, &indices);
    assert!(common::max_abs_diff(&logits, &dense.logits) < 1e-10);
}

#[test]
fn mask_order_does_not_matter() {
    let pool = eight_token_pool(60);
    let params = busy_params(61);
    let sorted = SelectionMask::ungrouped(vec![1, 4, 6]);
    let shuffled = SelectionMask {
        indices: vec![6, 1, 4],
        group_of: vec![0; 3],
        quota: vec![3],
    };
    assert_eq!(run_forward(&params, &pool, &sorted), run_forward(&params, &pool, &shuffled));
}

#[test]
fn unselected_duplicate_has_no_influence() {
    let mut pool = eight_token_pool(62);
    let params = busy_params(63);
    let row = pool.features.row(2).to_vec();
    pool.features.data_mut()[5 * row.len()..6 * row.len()].copy_from_slice(&row);
    let mask = SelectionMask::ungrouped(vec![0, 2, 3, 7]);
    let before = run_forward(&params, &pool, &mask);
    pool.features.data_mut()[5 * row.len()..6 * row.len()].fill(0.9);
    assert_eq!(before, run_forward(&params, &pool, &mask));
}

#[test]
fn every_token_count_runs() {
    let pool = eight_token_pool(64);
    let params = busy_params(65);
    for k in 1..=pool.len() {
        let (logits, _, cls) = run_forward(&params, &pool, &SelectionMask::ungrouped((0..k).collect()));
        assert_eq!(logits.len(), 4);
        assert_eq!(cls.len(), k);
    }
}

#[test]
fn empty_and_duplicate_masks_are_rejected() {
    let pool = eight_token_pool(66);
    let params = busy_params(67);
    let mut g = Graph::new();
    let b = bind(&mut g, &params, false);
    assert!(forward(&mut g, &b, &params.config, &pool, &SelectionMask::ungrouped(vec![])).is_err());
    let dup = SelectionMask {
        indices: vec![1, 1],
        group_of: vec![0, 0],
        quota: vec![2],
    };
    assert!(forward(&mut g, &b, &params.config, &pool, &dup).is_err());
}

#[test]
fn fresh_model_matches_model_without_value_projection() {
    let pool = eight_token_pool(68);
    let params = init_params(&FluxViTConfig::tiny(), 69).unwrap();
    let mut plain = params.clone();
    plain.config.use_lpe = false;
    let mask = SelectionMask::full(8);
    assert_eq!(run_forward(&params, &pool, &mask), run_forward(&plain, &pool, &mask));
}

fn glpe_rows(params: &FluxViTParams, grid: &SamplingGrid, indices: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let v = glpe(&mut g, &b, &params.config, grid, indices).unwrap();
    g.value(v).clone()
}

#[test]
fn glpe_at_max_grid_with_identity_kernel_is_the_table() {
    let params = init_params(&FluxViTConfig::tiny(), 70).unwrap();
    let cfg = &params.config;
    let grid = SamplingGrid::new(12, 21, cfg.patch);
    assert_eq!(grid.dims(), cfg.pe_grid);
    let table = sincos_3d(cfg.pe_grid, cfg.d_model);
    let indices = vec![0, 5, 17, 100, 107];
    let rows = glpe_rows(&params, &grid, &indices);
    for (r, &i) in indices.iter().enumerate() {
        assert_eq!(rows.row(r), &table.data()[i * 32..(i + 1) * 32]);
    }
    let all: Vec<usize> = (0..grid.pool).collect();
    assert_eq!(glpe_rows(&params, &grid, &all).data(), table.data());
}

#[test]
fn glpe_permutes_with_its_indices() {
    let params = busy_params(71);
    let grid = SamplingGrid::new(6, 14, [1, 7, 7]);
    let idx = vec![3, 9, 0, 22, 17];
    let perm = [4, 2, 0, 3, 1];
    let permuted: Vec<usize> = perm.iter().map(|&j| idx[j]).collect();
    let a = glpe_rows(&params, &grid, &idx);
    let b = glpe_rows(&params, &grid, &permuted);
    for (r, &j) in perm.iter().enumerate() {
        assert_eq!(b.row(r), a.row(j));
    }
}

#[test]
fn glpe_rejects_grid_larger_than_table() {
    let params = init_params(&FluxViTConfig::tiny(), 72).unwrap();
    let grid = SamplingGrid::new(14, 14, [1, 7, 7]);
    let mut g = Graph::new();
    let b = bind(&mut g, &params, false);
    assert!(glpe(&mut g, &b, &params.config, &grid, &[0]).is_err());
}

#[test]
fn dual_patch_norm_standardizes_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    for seed in 0..4 {
        let params = init_params(&FluxViTConfig::desk_student(), seed).unwrap();
        let raw = random_tensor(&mut rng, &[64, 588], 3.0);
        let mut g = Graph::new();
        let b = bind(&mut g, &params, false);
        let r = g.constant(raw);
        let e = patch_embed_dpn(&mut g, &b, &params.config, r).unwrap();
        let e = g.value(e);
        for i in 0..e.rows() {
            let row = e.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn constant_patch_embeds_to_normalized_bias() {
    let mut params = busy_params(81);
    params.set.get_mut("patch.ln_pre.shift").unwrap().data_mut().fill(0.0);
    // 0.5 keeps the row mean exact, so LN_pre sees zero deviation
    let raw = Tensor::full(&[3, 147], 0.5);
    let mut g = Graph::new();
    let b = bind(&mut g, &params, false);
    let r = g.constant(raw);
    let e = patch_embed_dpn(&mut g, &b, &params.config, r).unwrap();
    let bias = common::to_mat(&params.tensor("patch.bias").unwrap().reshape(&[1, 32]).unwrap());
    let expect = common::layer_norm(
        &bias,
        params.tensor("patch.ln_post.scale").unwrap().data(),
        params.tensor("patch.ln_post.shift").unwrap().data(),
    );
    for i in 0..3 {
        let diff = common::max_abs_diff(g.value(e).row(i), &expect[0]);
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn pre_norm_changes_patch_gradient_norm() {
    // high-contrast patches: saturated black/white pixels
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let raw = Tensor::from_fn(&[16, 147], |_| if rng.random_bool(0.5) { 0.0 } else { 255.0 });
    let grad_norm = |use_pre_ln: bool| {
        let mut cfg = FluxViTConfig::tiny();
        cfg.use_pre_ln = use_pre_ln;
        let params = init_params(&cfg, 91).unwrap();
        let mut g = Graph::new();
        let b = bind(&mut g, &params, true);
        let r = g.constant(raw.clone());
        let e = patch_embed_dpn(&mut g, &b, &cfg, r).unwrap();
        let target = g.constant(Tensor::from_fn(&[16, 32], |i| ((i * 7) % 5) as f64 - 2.0));
        let l = g.smooth_l1(e, target, 1.0).unwrap();
        let grads = g.backward(l).unwrap();
        grads.get(b.get("patch.weight").unwrap()).unwrap().norm()
    };
    let (with, without) = (grad_norm(true), grad_norm(false));
    assert!(with.is_finite() && without.is_finite());
    assert!((with - without).abs() > 1e-3 * with.max(without), "{with} vs {without}");
}

#[test]
fn init_is_seeded_and_has_the_right_spread() {
    let cfg = FluxViTConfig::desk_student();
    let a = init_params(&cfg, 5).unwrap();
    assert_eq!(a, init_params(&cfg, 5).unwrap());
    assert_ne!(a, init_params(&cfg, 6).unwrap());
    let w = a.tensor("patch.weight").unwrap().data();
    assert!(w.len() >= 10_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!((std - 0.02).abs() < 0.1 * 0.02, "std {std}");
    assert!(w.iter().all(|v| v.abs() <= 0.06));
    assert!(a.tensor("head.weight").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.tensor("blocks.0.lpe").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.tensor("patch.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = FluxViTConfig::tiny();
    cfg.heads = 3;
    assert!(init_params(&cfg, 0).is_err());
    let mut cfg = FluxViTConfig::tiny();
    cfg.dw_kernel = 2;
    assert!(init_params(&cfg, 0).is_err());
}

#[test]
fn embed_pool_agrees_with_graph_embedding() {
    let spec = GenSpec::default();
    let video = gen_video(3, &spec).unwrap();
    let grid = SamplingGrid::new(8, 56, [1, 14, 14]);
    let pool = patchify(&video, &grid).unwrap();
    let params = init_params(&FluxViTConfig::desk_student(), 3).unwrap();
    let e = embed_pool(&params, &pool).unwrap();
    assert_eq!(e.shape(), &[128, 64]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt/model.bin");
    let params = busy_params(100);
    let index = save_checkpoint(&path, &params).unwrap();
    assert_eq!(index.order.len(), params.set.len());
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, params.config);
    for ((na, ta), (nb, tb)) in params.set.iter().zip(back.set.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
    // truncated blob is rejected
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn small_model_gradients_match_finite_differences() {
    // a cut-down variant of the full check (the full one lives in the acceptance suite)
    let mut cfg = FluxViTConfig::tiny();
    cfg.depth = 1;
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.pe_grid = [4, 3, 3];
    let (report, names) = gradcheck_model(&cfg, 11, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.per_tensor.len(), names.len());
}
