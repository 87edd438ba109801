mod common;

use std::collections::BTreeSet;

use ctxrec::autograd::Graph;
use ctxrec::backbones::BackboneKind;
use ctxrec::ict;
use ctxrec::params::ParamStore;
use ctxrec::training::{bce_loss, sampled_softmax_loss, Variant};
use ndarray::Array2;
use rand::Rng;

const TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn sweep(backbone: BackboneKind, variant: Variant) {
    let mut active = BTreeSet::new();
    let mut all = BTreeSet::new();
    for seed in 0..20 {
        let inst = common::instance(seed, backbone, variant, (seed % 3) as usize);
        let r = common::fd_check(&inst, 0.5, H);
        assert!(
            r.max_rel_err <= TOL,
            "{backbone:?}/{variant} seed {seed}: rel err {:.2e} at {}",
            r.max_rel_err,
            r.worst
        );
        active.extend(r.active);
        all.extend(r.all);
    }
    // every tensor must have been exercised with a non-zero gradient
    let idle: Vec<_> = all.difference(&active).collect();
    assert!(idle.is_empty(), "never exercised: {idle:?}");
}

#[test]
fn fm_deep_full_model() {
    sweep(BackboneKind::FmDeep, Variant::Full);
}

#[test]
fn target_attention_full_model() {
    sweep(BackboneKind::TargetAttention, Variant::Full);
}

#[test]
fn two_tower_full_model() {
    sweep(BackboneKind::TwoTower, Variant::Full);
}

#[test]
fn ablation_variants() {
    for variant in [Variant::NoCot, Variant::MeanPool, Variant::Plain] {
        for seed in 0..6 {
            let inst = common::instance(seed, BackboneKind::FmDeep, variant, 2);
            let r = common::fd_check(&inst, 0.5, H);
            assert!(r.max_rel_err <= TOL, "{variant} seed {seed}: {}", r.worst);
        }
    }
}

#[test]
fn recon_loss_alone() {
    let mut r = common::rng(11);
    for seed in 0..20u64 {
        let k = 1 + (seed % 2) as usize;
        let d = 3 + (seed % 4) as usize;
        let inst = common::instance(seed, BackboneKind::FmDeep, Variant::Full, k);
        let len = 3 * k + 1;
        let mut store = ParamStore::new();
        let hid = store
            .insert("h", Array2::from_shape_fn((len, d), |_| r.gen_range(-1.0..1.0)))
            .unwrap();
        let targets = Array2::from_shape_fn((k, d), |_| r.gen_range(-1.0..1.0));
        let ctx: Vec<_> = inst.context.iter().collect();
        let seq = ict::assemble(&inst.query, &inst.text, &ctx, false, true);
        let value = |p: &ParamStore| {
            let mut g = Graph::new(p);
            let h = g.param(hid);
            let t = g.constant(targets.clone());
            let l = ict::recon_loss(&mut g, h, &seq, Some(t)).unwrap();
            g.scalar(l)
        };
        let mut g = Graph::new(&store);
        let h = g.param(hid);
        let t = g.constant(targets.clone());
        let l = ict::recon_loss(&mut g, h, &seq, Some(t)).unwrap();
        let mut grads = store.zero_grads();
        g.backward(l, &mut grads);
        drop(g);
        let mut p = store.clone();
        for i in 0..len {
            for j in 0..d {
                let orig = p.get(hid)[[i, j]];
                p.get_mut(hid)[[i, j]] = orig + H;
                let up = value(&p);
                p.get_mut(hid)[[i, j]] = orig - H;
                let down = value(&p);
                p.get_mut(hid)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * H);
                let e = common::rel_err(grads.get(hid)[[i, j]], numeric);
                assert!(e <= TOL, "seed {seed} h[{i},{j}]: {e:.2e}");
            }
        }
    }
}

#[test]
fn scalar_losses_match_closed_forms() {
    let mut r = common::rng(3);
    for _ in 0..200 {
        let z: f64 = r.gen_range(-8.0..8.0);
        for y in [0u8, 1] {
            let numeric = (bce_loss(z + H, y) - bce_loss(z - H, y)) / (2.0 * H);
            let analytic = 1.0 / (1.0 + (-z).exp()) - y as f64;
            assert!(common::rel_err(analytic, numeric) <= TOL);
        }
        let n = r.gen_range(2..10);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for i in 0..n {
            let mut up = scores.clone();
            up[i] += H;
            let mut down = scores.clone();
            down[i] -= H;
            let numeric = (sampled_softmax_loss(&up) - sampled_softmax_loss(&down)) / (2.0 * H);
            let analytic = scores[i].exp() / z - if i == 0 { 1.0 } else { 0.0 };
            assert!(common::rel_err(analytic, numeric) <= TOL);
        }
    }
}
