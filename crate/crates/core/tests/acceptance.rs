//! Acceptance criteria 1 to 11. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p unime-core --test acceptance -- --nocapture` to
//! see the lines; the training criteria (7 to 9) take several minutes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unime_core::autograd::{Ctx, Gradients, Tape};
use unime_core::checkpoint::Origin;
use unime_core::config::ExperimentConfig;
use unime_core::data_synth::{derive_seed, generate_case, MultimodalCase, PhantomParams};
use unime_core::evaluation::{
    dsc, evaluate_protocol, hd95, mean_region_dsc, parse_csv, to_csv, to_markdown, EvalConfig, Interpolation,
};
use unime_core::finetune::{run_finetuning, FinetuneModel};
use unime_core::masking::{protocol_subsets, sample_modality_mask, MaskSpec};
use unime_core::optimization::{llrd_groups, lr_at_step, total_loss, LossConfig, ScheduleConfig};
use unime_core::params::ParamStore;
use unime_core::pretrain::{run_pretraining, validation_loss, validation_specs, PretrainModel};
use unime_core::seg_network::{Mode, SegNetwork};
use unime_core::uni_encoder::rope_rotate;
use unime_core::{Architecture, RunOptions, Tensor, UniEncoderConfig};

/// Criteria run one at a time so their runtime limits measure a whole core.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // straight to the handle so the line survives the harness's output capture
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[criterion {n:>2}] {verdict} {title}: {detail}");
}

fn desk() -> ExperimentConfig {
    ExperimentConfig::preset("desk").unwrap()
}

fn phantoms(seed: u64, n: usize, dims: [usize; 3]) -> Vec<MultimodalCase> {
    (0..n)
        .map(|i| generate_case(derive_seed(seed, i as u64), dims, &PhantomParams::default(), 8).unwrap())
        .collect()
}

// ---------------------------------------------------------------- 1

/// P(δ = d) for non-empty `d` under independent drops renormalized by Σδ ≥ 1.
fn delta_law(p: [f64; 4]) -> BTreeMap<[bool; 4], f64> {
    let mut out = BTreeMap::new();
    let mut empty = 1.0;
    for m in 0..4 {
        empty *= p[m];
    }
    for bits in 1..16u32 {
        let d = [0, 1, 2, 3].map(|m| bits >> m & 1 == 1);
        let pr: f64 = (0..4).map(|m| if d[m] { 1.0 - p[m] } else { p[m] }).product();
        out.insert(d, pr / (1.0 - empty));
    }
    out
}

#[test]
fn criterion_01_masking_law() {
    let _serial = serial();
    let start = Instant::now();
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut on = [0usize; 4];
    let mut empty = 0usize;
    for _ in 0..n {
        let d = sample_modality_mask(&[0.5; 4], &mut rng).unwrap();
        empty += usize::from(!d.iter().any(|&x| x));
        for m in 0..4 {
            on[m] += usize::from(d[m]);
        }
    }
    let marg: Vec<f64> = on.iter().map(|&c| c as f64 / n as f64).collect();
    let marg_err = marg.iter().map(|f| (f - 8.0 / 15.0).abs()).fold(0.0, f64::max);

    let p = [0.1, 0.35, 0.6, 0.85];
    let law = delta_law(p);
    let mut counts: BTreeMap<[bool; 4], usize> = BTreeMap::new();
    for _ in 0..n {
        *counts.entry(sample_modality_mask(&p, &mut rng).unwrap()).or_default() += 1;
    }
    let joint_err = law
        .iter()
        .map(|(d, pr)| (counts.get(d).copied().unwrap_or(0) as f64 / n as f64 - pr).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = marg_err <= 0.005 && empty == 0 && joint_err <= 0.005 && elapsed < Duration::from_secs(30);
    report(
        1,
        "masking law",
        pass,
        &format!(
            "marginals {marg:.4?} vs 8/15, max err {marg_err:.5}; empty samples {empty}; \
             asymmetric p max joint err {joint_err:.5}; {elapsed:.1?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_missing_modality_invariance() {
    let _serial = serial();
    let start = Instant::now();
    let cfg = desk();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = SegNetwork::new(&mut store, Architecture::Full, &cfg.encoder, [16; 3], &mut rng).unwrap();
    let cases = phantoms(22, 4, [16; 3]);
    let subsets = protocol_subsets();
    let mut identical = 0;
    for trial in 0..20 {
        let case = &cases[trial % cases.len()];
        let delta = loop {
            let d = subsets[rng.random_range(0..15)];
            if d.iter().any(|&x| !x) {
                break d;
            }
        };
        let missing: Vec<usize> = (0..4).filter(|&m| !delta[m]).collect();
        let m = missing[rng.random_range(0..missing.len())];
        let mut perturbed = case.volumes.clone();
        let n = perturbed.numel() / 4;
        for v in &mut perturbed.data_mut()[m * n..(m + 1) * n] {
            *v = rng.random_range(-5.0..5.0);
        }
        let run = |x: &Tensor<f32>| {
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &store);
            let out = net.segment(cx, cx.constant(x.clone()), delta, Mode::Eval).unwrap();
            (*out.main_logits.value()).clone()
        };
        if run(&case.volumes).data() == run(&perturbed).data() {
            identical += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = identical == 20 && elapsed < Duration::from_secs(120);
    report(
        2,
        "missing-modality invariance",
        pass,
        &format!("{identical}/20 perturbations left main logits bit-identical; {elapsed:.1?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

/// Coarse and fine steps for the extrapolated central differences.
const FD_STEPS: [f64; 2] = [1e-4, 2e-5];
/// Denominator floor: gradients below this are compared in absolute terms.
const FD_FLOOR: f64 = 1e-6;
/// Relative gap between D(h) and D(h/2) above which the coarse step is
/// considered curvature-dominated and the fine step is used instead.
const FD_REFINE: f64 = 1e-3;

/// Richardson-extrapolated central difference, (4·D(h/2) − D(h))/3, and the
/// raw gap |D(h) − D(h/2)|.
fn extrapolated_difference(f: &mut dyn FnMut(f64) -> f64, h: f64) -> (f64, f64) {
    let central = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(h) - f(-h)) / (2.0 * h);
    let coarse = central(f, h);
    let fine = central(f, h / 2.0);
    ((4.0 * fine - coarse) / 3.0, (fine - coarse).abs())
}

struct FdResult {
    worst: f64,
    /// Parameter name, analytic and numeric value at the worst entry.
    worst_at: (String, f64, f64),
    checked: usize,
    modules: BTreeSet<String>,
}

/// Central differences on sampled scalar entries.
fn finite_difference_check(
    store: &mut ParamStore<f64>,
    analytic: &Gradients<f64>,
    loss: &dyn Fn(&ParamStore<f64>) -> f64,
    target: usize,
    seed: u64,
) -> FdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    let mut picks: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .map(|(k, &id)| (k, rng.random_range(0..store.get(id).numel())))
        .collect();
    while picks.len() < target {
        let k = rng.random_range(0..ids.len());
        picks.push((k, rng.random_range(0..store.get(ids[k]).numel())));
    }
    let mut worst = 0.0f64;
    let mut worst_at = (String::new(), 0.0, 0.0);
    let mut modules = BTreeSet::new();
    for &(k, i) in &picks {
        let id = ids[k];
        let name = store.name(id).to_string();
        modules.insert(name.split('.').take(2).collect::<Vec<_>>().join("."));
        let orig = store.get(id).data()[i];
        let mut shifted = |dx: f64| {
            store.get_mut(id).data_mut()[i] = orig + dx;
            let v = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            v
        };
        let (mut numeric, gap) = extrapolated_difference(&mut shifted, FD_STEPS[0]);
        if gap > FD_REFINE * numeric.abs().max(FD_FLOOR) {
            numeric = extrapolated_difference(&mut shifted, FD_STEPS[1]).0;
        }
        let exact = analytic.get(id).map_or(0.0, |g| g.data()[i]);
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(FD_FLOOR);
        if rel > worst {
            worst = rel;
            worst_at = (format!("{name}[{i}]"), exact, numeric);
        }
    }
    FdResult {
        worst,
        worst_at,
        checked: picks.len(),
        modules,
    }
}

#[test]
fn criterion_03_gradient_correctness() {
    let _serial = serial();
    let start = Instant::now();
    let enc = UniEncoderConfig {
        patch: 8,
        d_embed: 48,
        layers: 2,
        heads: 6,
        registers: 2,
        rope_base: 10000.0,
    };
    let case = &phantoms(31, 1, [16; 3])[0];
    let x: Tensor<f64> = case.volumes.cast();

    // reconstruction loss
    let mut pm = PretrainModel::<f64>::new(&enc, [16; 3], 32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let spec = MaskSpec::sample([0.5; 4], [0.75; 4], pm.encoder.num_patches(), &mut rng).unwrap();
    let analytic = {
        let tape = Tape::training();
        let cx = Ctx::new(&tape, &pm.store);
        let l = pm.loss(cx, &x, &spec, 0.005).unwrap();
        tape.backward(l)
    };
    let (encoder, decoder) = (pm.encoder.clone(), pm.decoder.clone());
    let rec_loss = |store: &ParamStore<f64>| {
        let probe = PretrainModel {
            store: store.clone(),
            encoder: encoder.clone(),
            decoder: decoder.clone(),
            optimizer: unime_core::optimization::AdamW::new(0),
            step: 0,
        };
        probe.eval_loss(&x, &spec, 0.005).unwrap()
    };
    let rec = finite_difference_check(&mut pm.store, &analytic, &rec_loss, 200, 34);

    // segmentation loss, all modalities so every encoder contributes
    let mut fm = FinetuneModel::<f64>::new(Architecture::Full, &enc, [16; 3], 35).unwrap();
    let loss_cfg = LossConfig::default();
    let (_, analytic) = fm.loss_and_grads(&x, &case.labels, [true; 4], &loss_cfg).unwrap();
    let net = fm.net.clone();
    let seg_loss = |store: &ParamStore<f64>| {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, store);
        let out = net.segment(cx, cx.constant(x.clone()), [true; 4], Mode::Train).unwrap();
        total_loss(cx, &out, &case.labels, &loss_cfg).unwrap().total.item()
    };
    let seg = finite_difference_check(&mut fm.store, &analytic, &seg_loss, 200, 36);

    let elapsed = start.elapsed();
    let pass = rec.worst <= 1e-4
        && seg.worst <= 1e-4
        && rec.checked >= 200
        && seg.checked >= 200
        && elapsed < Duration::from_secs(600);
    let describe = |r: &FdResult| {
        format!(
            "{} entries over {} submodules, max rel err {:.2e} at {} (analytic {:.6e}, numeric {:.6e})",
            r.checked, r.modules.len(), r.worst, r.worst_at.0, r.worst_at.1, r.worst_at.2
        )
    };
    report(
        3,
        "gradient correctness",
        pass,
        &format!("L_rec: {}; L_total: {}; {elapsed:.1?}", describe(&rec), describe(&seg)),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_rope_properties() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let hd = 16;
    let base = 10000.0;
    let (mut shift_err, mut norm_err) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let mut vec = || Tensor::from_vec(&[1, 1, hd], (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (q, k) = (vec(), vec());
        let mut pos = || [0, 1, 2].map(|_| rng.random_range(-20.0..20.0));
        let (p1, p2, t) = (pos(), pos(), pos());
        let add = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
        let rot = |v: &Tensor<f64>, p: [f64; 3]| rope_rotate(v, &[p], base).unwrap();
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let before = dot(&rot(&q, p1), &rot(&k, p2));
        let after = dot(&rot(&q, add(p1, t)), &rot(&k, add(p2, t)));
        shift_err = shift_err.max((before - after).abs() / before.abs().max(1e-12));
        let n0 = q.sq_norm().sqrt();
        let n1 = rot(&q, p1).sq_norm().sqrt();
        norm_err = norm_err.max((n0 - n1).abs() / n0);
    }
    // near-orthogonal pairs make the relative measure ill-conditioned; report
    // the worst case over all draws anyway
    let pass = shift_err <= 1e-5 && norm_err <= 1e-6;
    report(
        4,
        "RoPE relative shift and norm",
        pass,
        &format!("1000 draws: max shift rel err {shift_err:.2e}, max norm rel err {norm_err:.2e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_schedule_exactness() {
    let _serial = serial();
    let cfg = ScheduleConfig {
        total_steps: 150_000,
        ..ScheduleConfig::default()
    };
    let t = cfg.total_steps;
    let warm = (0.05 * t as f64) as usize;
    let checks = [(0, 1e-5), (warm, 3e-4), (t, 1e-6)];
    let sched_err = checks
        .iter()
        .map(|&(s, want)| (lr_at_step(s, &cfg) - want).abs())
        .fold(0.0, f64::max);

    let (base, omega, layers) = (3e-4, 0.75, 16);
    let names: Vec<String> = (1..=layers).map(|l| format!("uni_encoder.layer{l}.attn.qkv.weight")).collect();
    let groups = llrd_groups(names.iter().map(String::as_str), base, omega, layers).unwrap();
    let mut exact = true;
    let mut lr1 = f64::NAN;
    for g in &groups {
        let l = g.layer.unwrap();
        let mut want = base;
        for _ in 0..(layers - l) {
            want *= omega;
        }
        exact &= (g.lr - want).abs() <= 1e-18;
        if l == 1 {
            lr1 = g.lr;
        }
    }
    let pass = sched_err <= 1e-12 && exact && groups.len() == layers;
    report(
        5,
        "schedule exactness",
        pass,
        &format!(
            "max |lr - target| at 0, 0.05T, T = {sched_err:.1e}; {} LLRD groups equal base_lr*w^(L-l); \
             layer 1 lr = {lr1:.6e} (the quoted approximation 4.0105e-6 does not equal 3e-4*0.75^15)",
            groups.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

fn brute_surface(m: &[bool], d: [usize; 3]) -> Vec<[i64; 3]> {
    let at = |z: i64, y: i64, x: i64| {
        if z < 0 || y < 0 || x < 0 || z >= d[0] as i64 || y >= d[1] as i64 || x >= d[2] as i64 {
            false
        } else {
            m[((z as usize * d[1]) + y as usize) * d[2] + x as usize]
        }
    };
    let mut out = Vec::new();
    for z in 0..d[0] as i64 {
        for y in 0..d[1] as i64 {
            for x in 0..d[2] as i64 {
                let n6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if at(z, y, x) && n6.iter().any(|&(a, b, c)| !at(z + a, y + b, x + c)) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

fn brute_hd95(a: &[bool], b: &[bool], d: [usize; 3]) -> f64 {
    let (sa, sb) = (brute_surface(a, d), brute_surface(b, d));
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    if sa.is_empty() || sb.is_empty() {
        return d.iter().map(|&k| ((k - 1) * (k - 1)) as f64).sum::<f64>().sqrt();
    }
    let nearest = |p: &[i64; 3], set: &[[i64; 3]]| {
        set.iter()
            .map(|q| ((p[0] - q[0]).pow(2) + (p[1] - q[1]).pow(2) + (p[2] - q[2]).pow(2)) as f64)
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut all: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).collect();
    all.extend(sb.iter().map(|p| nearest(p, &sa)));
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    all[lo] + (all[hi] - all[lo]) * (pos - lo as f64)
}

#[test]
fn criterion_06_metric_oracles() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let brute_cfg = EvalConfig::default();
    let edt_cfg = EvalConfig {
        brute_force_limit: 0,
        ..EvalConfig::default()
    };
    assert_eq!(brute_cfg.interpolation, Interpolation::Linear);
    let (mut dsc_bad, mut hd_err) = (0, 0.0f64);
    for _ in 0..200 {
        let d = [0, 1, 2].map(|_| rng.random_range(2..=12usize));
        let n = d.iter().product::<usize>();
        let (fa, fb) = (rng.random::<f64>(), rng.random::<f64>());
        let a: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < fa * 0.5).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < fb * 0.5).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let (ca, cb) = (a.iter().filter(|x| **x).count(), b.iter().filter(|x| **x).count());
        let want = if ca + cb == 0 { 1.0 } else { 2.0 * inter as f64 / (ca + cb) as f64 };
        dsc_bad += usize::from(dsc(&a, &b).unwrap() != want);
        let oracle = brute_hd95(&a, &b, d);
        for cfg in [&brute_cfg, &edt_cfg] {
            hd_err = hd_err.max((hd95(&a, &b, d, [1.0; 3], cfg).unwrap() - oracle).abs());
        }
    }
    let d = [16; 3];
    let empty = vec![false; 4096];
    let mut one = empty.clone();
    one[100] = true;
    let sentinel = (3.0f64 * 225.0).sqrt();
    let edges = dsc(&empty, &empty).unwrap() == 1.0
        && hd95(&empty, &empty, d, [1.0; 3], &brute_cfg).unwrap() == 0.0
        && (hd95(&empty, &one, d, [1.0; 3], &brute_cfg).unwrap() - sentinel).abs() < 1e-12
        && (hd95(&one, &empty, d, [1.0; 3], &brute_cfg).unwrap() - sentinel).abs() < 1e-12;
    let pass = dsc_bad == 0 && hd_err <= 1e-9 && edges;
    report(
        6,
        "metric oracles",
        pass,
        &format!(
            "200 random pairs: dsc mismatches {dsc_bad}, max hd95 err {hd_err:.1e} (brute force and distance transform); \
             empty/one-empty edge cases {}",
            if edges { "ok" } else { "wrong" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_pretraining_sanity() {
    let _serial = serial();
    let start = Instant::now();
    let cfg = desk();
    let cases = phantoms(71, cfg.data.n_cases, cfg.data.dims);
    let (train, _) = cases.split_at(6);
    let run = || {
        let mut model = PretrainModel::<f32>::new(&cfg.encoder, cfg.model.input_dims, 72).unwrap();
        let specs = validation_specs(train.len(), model.encoder.num_patches(), &cfg.mask, 73).unwrap();
        let w = cfg.pretrain.mask_reg_weight;
        let before = validation_loss(&model, train, &specs, w).unwrap();
        let summary = run_pretraining(&mut model, train, &[], &cfg.pretrain, &cfg.mask, &RunOptions::new(74)).unwrap();
        let after = validation_loss(&model, train, &specs, w).unwrap();
        let weights: Vec<Tensor<f32>> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
        (before, after, summary.losses, weights)
    };
    let (before, after, curve, weights) = run();
    let (_, _, curve2, weights2) = run();
    let steps = curve.len();
    let bitwise = curve.iter().map(|v| v.to_bits()).eq(curve2.iter().map(|v| v.to_bits())) && weights == weights2;
    let pass = steps == 500 && after < 0.5 * before && bitwise;
    report(
        7,
        "pretraining sanity",
        pass,
        &format!(
            "{steps} steps; probe loss {before:.5} -> {after:.5} (ratio {:.3}); training loss first {:.5} last {:.5}; \
             re-run bit-identical: {bitwise}; {:.1?}",
            after / before,
            curve[0],
            curve[steps - 1],
            start.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_finetuning_overfit() {
    let _serial = serial();
    let start = Instant::now();
    let cfg = desk();
    let train = phantoms(81, 4, cfg.data.dims);
    let mut stage1 = PretrainModel::<f32>::new(&cfg.encoder, cfg.model.input_dims, 82).unwrap();
    run_pretraining(&mut stage1, &train, &[], &cfg.pretrain, &cfg.mask, &RunOptions::new(83)).unwrap();
    let ck = stage1.checkpoint(&RunOptions::new(83), BTreeMap::new());
    let mut model =
        FinetuneModel::<f32>::from_stage1(&ck, cfg.model.arch, &cfg.encoder, cfg.model.input_dims, 84).unwrap();
    let finetune_start = Instant::now();
    let summary = run_finetuning(&mut model, &train, &[], &cfg.finetune, &cfg.mask, &RunOptions::new(85)).unwrap();
    let finetune_time = finetune_start.elapsed();
    let dsc = mean_region_dsc(&model, &train, [true; 4]).unwrap();
    let pass = summary.final_step == 2000 && dsc[0] >= 0.85 && finetune_time <= Duration::from_secs(1800);
    report(
        8,
        "fine-tuning overfit",
        pass,
        &format!(
            "4 cases, {} steps; training DSC WT {:.4} TC {:.4} ET {:.4} (all modalities); \
             fine-tuning {finetune_time:.1?}, total {:.1?}",
            summary.final_step,
            dsc[0],
            dsc[1],
            dsc[2],
            start.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

/// Steps per arm for the pretraining-benefit comparison.
const TREND_STEPS: usize = 300;

#[test]
fn criterion_09_pretraining_benefit_trend() {
    let _serial = serial();
    let start = Instant::now();
    let cfg = desk();
    let mut ft = cfg.finetune.clone();
    ft.optim.total_steps = TREND_STEPS;
    let seeds = [901u64, 902, 903];
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for &seed in &seeds {
        let cases = phantoms(seed, 20, cfg.data.dims);
        let (train, test) = (&cases[..14], &cases[16..]);
        let mut stage1 = PretrainModel::<f32>::new(&cfg.encoder, cfg.model.input_dims, seed).unwrap();
        run_pretraining(&mut stage1, train, &[], &cfg.pretrain, &cfg.mask, &RunOptions::new(seed)).unwrap();
        let ck = stage1.checkpoint(&RunOptions::new(seed), BTreeMap::new());
        let dims = cfg.model.input_dims;
        let mut a = FinetuneModel::<f32>::from_stage1(&ck, Architecture::Full, &cfg.encoder, dims, seed).unwrap();
        let mut b = FinetuneModel::<f32>::new(Architecture::Full, &cfg.encoder, dims, seed).unwrap();
        for m in [&mut a, &mut b] {
            run_finetuning(m, train, &[], &ft, &cfg.mask, &RunOptions::new(seed + 1)).unwrap();
        }
        let score = |m: &FinetuneModel<f32>| evaluate_protocol(m, test, &EvalConfig::default()).unwrap().0.mean_dsc();
        with.push(score(&a));
        without.push(score(&b));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mw, mo) = (mean(&with), mean(&without));
    // non-blocking: the line reports the trend, the test never fails on it
    report(
        9,
        "pretraining benefit (non-blocking trend)",
        mw >= mo,
        &format!(
            "seeds {seeds:?}, {TREND_STEPS} fine-tuning steps, 4 held-out cases each; mean all-subset DSC \
             stage-1 init {mw:.2} {with:.2?} vs scratch {mo:.2} {without:.2?}; {:.1?}",
            start.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_protocol_shape() {
    let _serial = serial();
    let cfg = desk();
    let model = FinetuneModel::<f32>::new(Architecture::Full, &cfg.encoder, [16; 3], 101).unwrap();
    let cases = phantoms(102, 2, [16; 3]);
    let (report_, _) = evaluate_protocol(&model, &cases, &EvalConfig::default()).unwrap();
    let csv = to_csv(&report_);
    let header_ok = csv.lines().next() == Some("flair,t1,t1ce,t2,region,dsc,hd95");
    let data_rows = csv.lines().skip(1).count();
    let parsed = parse_csv(&csv).unwrap();
    let mut avg_err = 0.0f64;
    for r in 0..3 {
        let dsc_mean = parsed.rows.iter().map(|row| row.metrics[r].dsc).sum::<f64>() / 15.0;
        let hd_mean = parsed.rows.iter().map(|row| row.metrics[r].hd95).sum::<f64>() / 15.0;
        avg_err = avg_err.max((dsc_mean - report_.average[r].dsc).abs());
        avg_err = avg_err.max((hd_mean - report_.average[r].hd95).abs());
    }
    let md = to_markdown(&report_);
    let glyph_rows: Vec<String> = md
        .lines()
        .skip(2)
        .take(15)
        .map(|l| l.split('|').skip(1).take(4).map(str::trim).collect::<Vec<_>>().join(""))
        .collect();
    let want: Vec<String> = protocol_subsets()
        .iter()
        .map(|d| d.iter().map(|&x| if x { "●" } else { "○" }).collect())
        .collect();
    let t2_only = md.lines().any(|l| l.starts_with("| ○ | ○ | ○ | ● |"));
    let pass = header_ok
        && data_rows == 45
        && parsed.rows.len() == 15
        && parsed == report_
        && avg_err <= 1e-9
        && glyph_rows == want
        && t2_only;
    report(
        10,
        "protocol shape",
        pass,
        &format!(
            "{} subset rows x 3 regions x 2 metrics ({data_rows} CSV rows); averages vs row means max err {avg_err:.1e}; \
             markdown glyph order FLAIR,T1,T1ce,T2 {}",
            parsed.rows.len(),
            if glyph_rows == want { "matches" } else { "differs" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 11

fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        "seg" => format!("seg.{}", parts[1]),
        other => other.to_string(),
    }
}

#[test]
fn criterion_11_architecture_wiring() {
    let _serial = serial();
    let mut cfg = ExperimentConfig::preset("tiny").unwrap();
    cfg.finetune.optim.total_steps = 1;
    let cases = phantoms(111, 2, [16; 3]);
    let mut stage1 = PretrainModel::<f32>::new(&cfg.encoder, [16; 3], 112).unwrap();
    let ck1 = stage1.checkpoint(&RunOptions::new(0), BTreeMap::new());
    stage1.step = 0;

    let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<String>>();
    let cnn = [
        "seg.modality_enc0",
        "seg.modality_enc1",
        "seg.modality_enc2",
        "seg.modality_enc3",
        "seg.fuse0",
        "seg.fuse1",
        "seg.fuse2",
        "seg.shared_decoder",
    ];
    let mut full = set(&cnn);
    full.extend(set(&["uni_encoder", "seg.uni_fuse", "seg.decoder"]));
    let mut multi = set(&cnn);
    multi.extend(set(&["seg.fuse3", "seg.decoder"]));
    let uni = set(&["uni_encoder", "seg.uni_fuse", "seg.decoder"]);
    let variants = [
        ("full (stage-1 init)", Architecture::Full, true, &full),
        ("full (scratch)", Architecture::Full, false, &full),
        ("multi-only", Architecture::MultiOnly, false, &multi),
        ("uni-only (stage-1 init)", Architecture::UniOnly, true, &uni),
        ("uni-only (scratch)", Architecture::UniOnly, false, &uni),
    ];
    let mut all_ok = true;
    let mut lines = Vec::new();
    for (label, arch, pretrained, expected) in variants {
        let mut model = if pretrained {
            FinetuneModel::<f32>::from_stage1(&ck1, arch, &cfg.encoder, [16; 3], 113).unwrap()
        } else {
            FinetuneModel::<f32>::new(arch, &cfg.encoder, [16; 3], 113).unwrap()
        };
        let s = run_finetuning(&mut model, &cases, &[], &cfg.finetune, &cfg.mask, &RunOptions::new(114)).unwrap();
        let ck = model.checkpoint(&RunOptions::new(0), BTreeMap::new());
        let modules: BTreeSet<String> = ck.weight_names().iter().map(|n| module_of(n)).collect();
        let pre: BTreeSet<&str> = ck
            .manifest
            .tensors
            .iter()
            .filter(|r| r.origin == Origin::Pretrained)
            .map(|r| r.name.as_str())
            .collect();
        let enc_names: BTreeSet<&str> = ck.weight_names().into_iter().filter(|n| n.starts_with("uni_encoder.")).collect();
        let origin_ok = if pretrained { pre == enc_names && !pre.is_empty() } else { pre.is_empty() };
        let ok = s.final_step == 1 && &modules == expected && origin_ok;
        all_ok &= ok;
        lines.push(format!("{label}: {} modules{}", modules.len(), if ok { "" } else { " MISMATCH" }));
    }
    report(11, "architecture ablation wiring", all_ok, &lines.join("; "));
    assert!(all_ok);
}
