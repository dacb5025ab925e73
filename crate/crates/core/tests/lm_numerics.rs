mod common;

use common::{fd_config, fixture_batch, jitter, naive_mean_nll, naive_row_nll};
use mixsoup::lm::{backward, forward_nll, forward_nll_with, init_model, loss_and_grad, ModelConfig, Params, ParamSet};
use mixsoup::par::ExecPolicy;
use mixsoup::tokenizer::PackedBatch;
use mixsoup::Error;

fn fixture_params(cfg: &ModelConfig, seed: u64) -> Params<f64> {
    let mut p: Params<f64> = init_model(cfg).unwrap();
    jitter(&mut p, seed, 0.2);
    p
}

/// Largest per-coordinate relative error between the analytic gradient and
/// the fourth-order central difference with step 1e-3. The two-point stencil
/// carries an O(ε²) truncation term of ~1e-4 relative at this step, which
/// would measure the oracle rather than the gradient. The denominator is
/// floored at 1e-7, just above the stencil's f64 roundoff (~1e-13), so key
/// biases, whose true gradient is exactly zero, compare noise with noise.
fn worst_fd_error(p: &Params<f64>, batch: &PackedBatch) -> (f64, usize, f64, f64) {
    let analytic = backward(p, batch).unwrap();
    let eps = 1e-3;
    let mut worst = (0.0, 0, 0.0, 0.0);
    let mut q = p.clone();
    for i in 0..p.flat.len() {
        let orig = q.flat[i];
        let mut f = |d: f64| {
            q.flat[i] = orig + d;
            forward_nll(&q, batch).unwrap().mean_nll
        };
        let numeric = (-f(2.0 * eps) + 8.0 * f(eps) - 8.0 * f(-eps) + f(-2.0 * eps)) / (12.0 * eps);
        q.flat[i] = orig;
        let a = analytic.flat[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        if rel > worst.0 {
            worst = (rel, i, a, numeric);
        }
    }
    worst
}

#[test]
fn forward_matches_naive_oracle() {
    for (seed, parallel, tied) in [(1, true, true), (2, false, true), (3, true, false)] {
        let cfg = ModelConfig { parallel_blocks: parallel, tie_embeddings: tied, ..fd_config(seed) };
        let p = fixture_params(&cfg, seed);
        let batch = fixture_batch(cfg.seq_len, 3, seed, true);
        let ours = forward_nll(&p, &batch).unwrap();
        let oracle = naive_mean_nll(&p, &batch);
        assert!((ours.mean_nll - oracle).abs() < 1e-6, "seed {seed}: {} vs {oracle}", ours.mean_nll);
        for r in 0..batch.rows() {
            let (ids, mask) = batch.row(r);
            for (t, want) in naive_row_nll(&p, ids, mask).into_iter().enumerate() {
                let i = r * cfg.seq_len + t;
                assert_eq!(ours.losses.scored[i], want.is_some());
                if let Some(w) = want {
                    assert!((ours.losses.nll[i] - w).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    for (seed, parallel) in [(11, true), (12, true), (13, false)] {
        let cfg = ModelConfig { parallel_blocks: parallel, ..fd_config(seed) };
        let p = fixture_params(&cfg, seed);
        let batch = fixture_batch(cfg.seq_len, 2, seed, seed == 12);
        let (rel, i, a, n) = worst_fd_error(&p, &batch);
        let name = p.layout().tensor_at(i).unwrap().name.clone();
        assert!(rel <= 1e-5, "seed {seed}: {name}[{i}] analytic {a} numeric {n} rel {rel}");
    }
}

#[test]
fn zeroed_head_gives_uniform_loss() {
    let cfg = fd_config(5);
    let mut p: ParamSet = init_model(&cfg).unwrap();
    p.tensor_mut("tok_emb").unwrap().fill(0.0);
    let batch = fixture_batch(cfg.seq_len, 2, 5, false);
    let out = forward_nll(&p, &batch).unwrap();
    let ln_v = (258f64).ln();
    assert!((ln_v - 5.5530).abs() < 1e-4);
    for (l, s) in out.losses.nll.iter().zip(&out.losses.scored) {
        if *s {
            assert!((l - ln_v).abs() < 1e-5, "{l}");
        }
    }
}

#[test]
fn fully_masked_batch_is_an_error() {
    let cfg = fd_config(1);
    let p: Params<f64> = init_model(&cfg).unwrap();
    let mut b = PackedBatch::new(cfg.seq_len);
    b.push_row(&vec![1; cfg.seq_len], &vec![0; cfg.seq_len]);
    assert!(matches!(forward_nll(&p, &b), Err(Error::NoLossTokens)));
    assert!(matches!(backward(&p, &b), Err(Error::NoLossTokens)));
}

#[test]
fn out_of_vocab_token_is_rejected() {
    let cfg = fd_config(1);
    let p: Params<f64> = init_model(&cfg).unwrap();
    let mut b = PackedBatch::new(cfg.seq_len);
    b.push_row(&vec![300; cfg.seq_len], &vec![1; cfg.seq_len]);
    assert!(matches!(forward_nll(&p, &b), Err(Error::TokenOutOfRange { id: 300, .. })));
}

#[test]
fn tying_routes_head_gradient_into_embedding() {
    let tied_cfg = fd_config(21);
    let untied_cfg = ModelConfig { tie_embeddings: false, ..fd_config(21) };
    let tied = fixture_params(&tied_cfg, 21);
    let mut untied: Params<f64> = init_model(&untied_cfg).unwrap();
    // same weights, head initialised to a copy of the embedding
    for spec in tied.layout().tensors() {
        untied.tensor_mut(&spec.name).unwrap().copy_from_slice(tied.tensor(&spec.name).unwrap());
    }
    let emb = tied.tensor("tok_emb").unwrap().to_vec();
    untied.tensor_mut("lm_head").unwrap().copy_from_slice(&emb);
    let batch = fixture_batch(tied_cfg.seq_len, 2, 21, false);
    assert!((forward_nll(&tied, &batch).unwrap().mean_nll - forward_nll(&untied, &batch).unwrap().mean_nll).abs() < 1e-12);
    let gt = backward(&tied, &batch).unwrap();
    let gu = backward(&untied, &batch).unwrap();
    let et = gt.tensor("tok_emb").unwrap();
    let eu = gu.tensor("tok_emb").unwrap();
    let hu = gu.tensor("lm_head").unwrap();
    assert!(et.iter().zip(eu).any(|(a, b)| (a - b).abs() > 1e-9));
    for i in 0..et.len() {
        assert!((et[i] - (eu[i] + hu[i])).abs() < 1e-12);
    }
}

#[test]
fn causal_positions_ignore_the_future() {
    let cfg = fd_config(31);
    let p = fixture_params(&cfg, 31);
    let base = fixture_batch(cfg.seq_len, 1, 31, false);
    let before = forward_nll(&p, &base).unwrap().losses;
    for j in 1..cfg.seq_len {
        let mut b = base.clone();
        b.token_ids[j] = (b.token_ids[j] + 17) % 256;
        let after = forward_nll(&p, &b).unwrap().losses;
        // position t predicts token t+1, so positions < j-1 see neither change
        for t in 0..j.saturating_sub(1) {
            assert_eq!(before.nll[t], after.nll[t], "perturbing {j} changed {t}");
        }
    }
}

#[test]
fn row_order_only_permutes_losses() {
    let cfg = fd_config(41);
    let p = fixture_params(&cfg, 41);
    let b = fixture_batch(cfg.seq_len, 4, 41, false);
    let mut shuffled = PackedBatch::new(cfg.seq_len);
    for r in [2, 0, 3, 1] {
        let (ids, mask) = b.row(r);
        shuffled.push_row(ids, mask);
    }
    let a = forward_nll(&p, &b).unwrap();
    let s = forward_nll(&p, &shuffled).unwrap();
    assert!((a.mean_nll - s.mean_nll).abs() < 1e-12);
    for (new_r, old_r) in [2, 0, 3, 1].into_iter().enumerate() {
        assert_eq!(a.losses.row_total(old_r), s.losses.row_total(new_r));
    }
}

#[test]
fn execution_policy_does_not_change_results() {
    let cfg = fd_config(51);
    let p: ParamSet = fixture_params(&cfg, 51).cast();
    let b = fixture_batch(cfg.seq_len, 5, 51, true);
    let (ls, gs) = loss_and_grad(&p, &b, ExecPolicy::Sequential).unwrap();
    let (lp, gp) = loss_and_grad(&p, &b, ExecPolicy::Parallel).unwrap();
    assert_eq!(ls, lp);
    assert_eq!(gs.flat, gp.flat);
    let fs = forward_nll_with(&p, &b, ExecPolicy::Sequential).unwrap();
    assert_eq!(fs.mean_nll, ls);
}
