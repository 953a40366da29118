//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segd_core::components::components_3d;
use segd_core::evaluation::evaluate;
use segd_core::geodesic::{geodesic_multi, Membership, PatchGraph};
use segd_core::maxflow::{FlowGraph, Side};
use segd_core::mvol::{self, MvolData};
use segd_core::phantom::{generate, support_template, Phantom, PhantomSpec};
use segd_core::pipeline::{run_pipeline, run_stage, PipelineConfig, Stage};
use segd_core::preprocess::{run_preprocess, template_from_labels};
use segd_core::scribble::ScribbleSet;
use segd_core::tps::{fit_tps, make_warp_steps, ControlPoints, SetId, Tps, WarpMode};
use segd_core::tracker::SeedPoint;
use segd_core::{Label, LabelVolume, Volume};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    let o = Outcome { name, pass, detail, secs: t.elapsed().as_secs_f64() };
    println!("{} {:<22} {} [{:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail, o.secs);
    o
}

// ---- geodesic oracle ----

/// All-pairs shortest paths over non-excluded nodes, in exact integers.
fn floyd_warshall(n: usize, membership: &[Membership], edges: &[(usize, usize, u32)]) -> Vec<Vec<Option<u32>>> {
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for &(a, b, w) in edges {
        if membership[a] == Membership::Excluded || membership[b] == Membership::Excluded {
            continue;
        }
        for (x, y) in [(a, b), (b, a)] {
            if d[x][y].is_none_or(|c| w < c) {
                d[x][y] = Some(w);
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

fn geodesic_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut graphs, mut mismatches) = (0, 0);
    while graphs < 240 {
        let (gw, gh) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
        let n = gw * gh;
        if n < 2 {
            continue;
        }
        let membership: Vec<Membership> = (0..n)
            .map(|_| match rng.gen_range(0..10) {
                0..=2 => Membership::Reference,
                3 => Membership::Excluded,
                _ => Membership::Candidate,
            })
            .collect();
        let refs: Vec<usize> = (0..n).filter(|&i| membership[i] == Membership::Reference).collect();
        if refs.is_empty() {
            continue;
        }
        let mut edges = Vec::new();
        for y in 0..gh {
            for x in 0..gw {
                let i = x + gw * y;
                if x + 1 < gw && rng.gen_bool(0.9) {
                    edges.push((i, i + 1, rng.gen_range(0..=20u32)));
                }
                if y + 1 < gh && rng.gen_bool(0.9) {
                    edges.push((i, i + gw, rng.gen_range(0..=20u32)));
                }
            }
        }
        let m = [1, 3, 10][graphs % 3];
        let g = PatchGraph::from_parts(membership.clone(), edges.iter().map(|&(a, b, w)| (a, b, w as f64)).collect()).unwrap();
        let field = geodesic_multi(&g, m).unwrap();
        let d = floyd_warshall(n, &membership, &edges);
        let want = m.min(refs.len());
        for i in 0..n {
            let expect: Vec<f64> = if membership[i] == Membership::Excluded {
                Vec::new()
            } else {
                let mut v: Vec<f64> = refs.iter().map(|&r| d[r][i].map_or(f64::INFINITY, |x| x as f64)).collect();
                v.sort_by(f64::total_cmp);
                v.truncate(want);
                v
            };
            if field.nearest[i] != expect {
                mismatches += 1;
            }
        }
        graphs += 1;
    }
    (mismatches == 0, format!("{graphs} graphs, {mismatches} node mismatches"))
}

// ---- min-cut oracle ----

fn mincut_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut bad_value, mut bad_partition) = (0, 0);
    let graphs = 150;
    for _ in 0..graphs {
        let n = rng.gen_range(1..=12);
        let mut g = FlowGraph::new(n);
        let (mut src, mut snk) = (vec![0u64; n], vec![0u64; n]);
        for i in 0..n {
            let (a, b) = (rng.gen_range(0..=20u64), rng.gen_range(0..=20u64));
            g.add_tweights(i, a as f64, b as f64);
            src[i] += a;
            snk[i] += b;
        }
        let mut arcs = Vec::new();
        for _ in 0..rng.gen_range(0..=3 * n) {
            let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if i == j {
                continue;
            }
            let (c, r) = (rng.gen_range(0..=20u64), rng.gen_range(0..=20u64));
            g.add_edge(i, j, c as f64, r as f64);
            arcs.push((i, j, c));
            arcs.push((j, i, r));
        }
        let cut = |in_source: &dyn Fn(usize) -> bool| -> u64 {
            let t: u64 = (0..n).map(|i| if in_source(i) { snk[i] } else { src[i] }).sum();
            t + arcs.iter().filter(|&&(i, j, _)| in_source(i) && !in_source(j)).map(|a| a.2).sum::<u64>()
        };
        let best = (0u32..1 << n).map(|s| cut(&|i| s >> i & 1 == 1)).min().unwrap();
        let flow = g.maxflow();
        if flow != best as f64 {
            bad_value += 1;
        }
        if cut(&|i| g.side(i) == Side::Source) != best {
            bad_partition += 1;
        }
    }
    (bad_value + bad_partition == 0, format!("{graphs} graphs, {bad_value} value and {bad_partition} partition mismatches"))
}

// ---- TPS ----

fn spline_errors(t: &Tps, src: &[(f64, f64)], dst: &[(f64, f64)]) -> (f64, f64) {
    let interp = src.iter().zip(dst).map(|(s, d)| {
        let f = t.eval(*s);
        (f.0 - d.0).abs().max((f.1 - d.1).abs())
    });
    let mut side = 0f64;
    for c in 0..2 {
        let sums = [
            t.weights.iter().map(|w| w[c]).sum::<f64>(),
            t.weights.iter().zip(src).map(|(w, p)| w[c] * p.0).sum::<f64>(),
            t.weights.iter().zip(src).map(|(w, p)| w[c] * p.1).sum::<f64>(),
        ];
        side = sums.iter().fold(side, |m, s| m.max(s.abs()));
    }
    (interp.fold(0.0, f64::max), side)
}

fn tps_exactness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_interp, mut worst_side, mut fits) = (0f64, 0f64, 0);
    let mut check = |t: &Tps, s: &[(f64, f64)], d: &[(f64, f64)]| {
        let (a, b) = spline_errors(t, s, d);
        worst_interp = worst_interp.max(a);
        worst_side = worst_side.max(b);
        fits += 1;
    };
    for _ in 0..200 {
        let k = rng.gen_range(3..=20);
        let src: Vec<(f64, f64)> = (0..k).map(|_| (rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0))).collect();
        let dst: Vec<(f64, f64)> = src.iter().map(|p| (p.0 + rng.gen_range(-10.0..10.0), p.1 + rng.gen_range(-10.0..10.0))).collect();
        if let Ok(t) = fit_tps(&src, &dst) {
            check(&t, &src, &dst);
        }
    }
    let mut worst_chain = 0f64;
    for (seed, n) in [(1, 2), (2, 9), (3, 120)] {
        let cp = ControlPoints::perturbed_grid(256, 256, 8.0, seed);
        let steps = make_warp_steps(&cp.src, &cp.dst, n).unwrap();
        let set = steps.set(SetId::One).unwrap();
        let mut pts = cp.src.clone();
        for (k, f) in set.functions.iter().enumerate() {
            let before = segd_core::tps::interpolate_points(&cp.src, &cp.dst, k, n);
            let after = segd_core::tps::interpolate_points(&cp.src, &cp.dst, k + 1, n);
            check(&f.forward, &before, &after);
            check(&f.inverse, &after, &before);
            pts = pts.iter().map(|&p| f.apply(p)).collect();
        }
        for (p, d) in pts.iter().zip(&cp.dst) {
            worst_chain = worst_chain.max((p.0 - d.0).abs().max((p.1 - d.1).abs()));
        }
    }
    let pass = worst_interp <= 1e-6 && worst_side <= 1e-9 && worst_chain <= 1e-5;
    (pass, format!("{fits} splines: interpolation {worst_interp:.1e}, side {worst_side:.1e}, Set-1 chain {worst_chain:.1e}"))
}

// ---- phantom pipelines ----

fn pipeline_config(spec: &PhantomSpec) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.preprocess.template = support_template(spec).map(|t| template_from_labels(&t).unwrap());
    cfg.tracker.auto_init = true;
    cfg
}

/// Body IoU with and without the tracking stage.
fn body_iou(v: &Volume, truth: &LabelVolume, cfg: &PipelineConfig) -> (f64, f64) {
    let r = run_pipeline(v, cfg, &ScribbleSet::default(), &[], Stage::Track, None).unwrap();
    let score = |l: &LabelVolume| evaluate(l, truth, Label::Body, "").unwrap().overall.unwrap_or(0.0);
    (score(r.final_labels()), score(r.labels(Stage::Grabcut).unwrap()))
}

fn end_to_end(p: &Phantom, spec: &PhantomSpec, base: &mut Option<f64>) -> (bool, String) {
    let t = Instant::now();
    let (iou, _) = body_iou(&p.volume, &p.truth, &pipeline_config(spec));
    let secs = t.elapsed().as_secs_f64();
    *base = Some(iou);
    (iou >= 0.85 && secs < 300.0, format!("body IoU {iou:.4} (need >= 0.85), pipeline {secs:.1} s"))
}

fn ablation() -> (bool, String) {
    let spec = PhantomSpec::default().with_distractors(8);
    let p = generate(&spec).unwrap();
    let (with, without) = body_iou(&p.volume, &p.truth, &pipeline_config(&spec));
    (with >= without, format!("with tracking {with:.4}, without {without:.4}"))
}

fn warp_robustness(p: &Phantom, spec: &PhantomSpec, base: Option<f64>) -> (bool, String) {
    let Some(base) = base else {
        return (false, "no unwarped baseline".into());
    };
    let [nx, ny, nz] = p.volume.dims();
    let cfg = pipeline_config(spec);
    let mut modes: Vec<(String, WarpMode)> = Vec::new();
    for (name, seed) in [("warp-1", 1), ("warp-2", 2)] {
        modes.push((name.into(), WarpMode::Single(ControlPoints::perturbed_grid(nx, ny, 8.0, seed).fit().unwrap())));
    }
    // the four sets step from the warp-1 points to their perturbations
    let cp = ControlPoints::perturbed_grid(nx, ny, 8.0, 1);
    let steps = make_warp_steps(&cp.src, &cp.dst, nz).unwrap();
    for id in [SetId::One, SetId::Two, SetId::Three, SetId::Four] {
        modes.push((format!("set-{id}"), WarpMode::PerFrame(steps.set(id).unwrap())));
    }
    let mut worst = 0f64;
    let mut parts = Vec::new();
    for (name, mode) in &modes {
        let (v, truth) = segd_core::tps::warp_volume(&p.volume, Some(&p.truth), mode).unwrap();
        let (iou, _) = body_iou(&v, &truth.unwrap(), &cfg);
        worst = worst.max((iou - base).abs());
        parts.push(format!("{name} {iou:.4}"));
    }
    (worst <= 0.05, format!("base {base:.4}; {}; max deviation {worst:.4}", parts.join(", ")))
}

fn class_iou(a: &LabelVolume, b: &LabelVolume, class: Label) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        inter += (x == class && y == class) as usize;
        union += (x == class || y == class) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

const PRE_CLASSES: [Label; 4] = [Label::ExteriorAir, Label::Support, Label::Metal, Label::Hollow];

fn preprocess_exactness(noisy: &Phantom, spec: &PhantomSpec) -> (bool, String) {
    let quiet_spec = spec.clone().noiseless();
    let quiet = generate(&quiet_spec).unwrap();
    let cfg = pipeline_config(spec).preprocess;
    let r = run_preprocess(&quiet.volume, &cfg).unwrap();
    let mut wrong = 0usize;
    for (&got, &truth) in r.labels.labels().iter().zip(quiet.truth.labels()) {
        let expect = if PRE_CLASSES.contains(&truth) { truth } else { Label::Unknown };
        wrong += (got != expect) as usize;
    }
    let r = run_preprocess(&noisy.volume, &cfg).unwrap();
    let ious: Vec<f64> = PRE_CLASSES.iter().map(|&c| class_iou(&r.labels, &noisy.truth, c)).collect();
    let metal_truth: Vec<bool> = noisy.truth.labels().iter().map(|&l| l == Label::Metal).collect();
    let comps = components_3d(&metal_truth, noisy.truth.dims());
    let found = comps.iter().filter(|c| c.iter().any(|&i| r.labels.labels()[i] == Label::Metal)).count();
    let pass = wrong == 0 && ious.iter().all(|&x| x >= 0.95) && found == comps.len();
    (
        pass,
        format!(
            "noiseless mismatches {wrong}; noisy IoU exterior {:.4} support {:.4} metal {:.4} hollow {:.4}; metal recall {found}/{}",
            ious[0],
            ious[1],
            ious[2],
            ious[3],
            comps.len()
        ),
    )
}

fn format_and_determinism() -> (bool, String) {
    let mut failures = Vec::new();
    let spec = PhantomSpec { dims: [128, 128, 32], seed: 5, ..PhantomSpec::default() };
    let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
    if mvol::encode_volume(&a.volume).unwrap() != mvol::encode_volume(&b.volume).unwrap()
        || mvol::encode_labels(&a.truth).unwrap() != mvol::encode_labels(&b.truth).unwrap()
    {
        failures.push("phantom");
    }

    let dir = tempfile::tempdir().unwrap();
    let (vp, lp) = (dir.path().join("v.mvol"), dir.path().join("l.mvol"));
    mvol::save_volume(&a.volume, &vp).unwrap();
    mvol::save_labels(&a.truth, &lp).unwrap();
    let v2 = mvol::load_volume(&vp).unwrap();
    let l2 = mvol::load_labels(&lp).unwrap();
    let same_v = v2.dims() == a.volume.dims() && v2.spacing() == a.volume.spacing() && v2.voxels() == a.volume.voxels();
    let same_l = l2.dims() == a.truth.dims() && l2.labels() == a.truth.labels();
    let bytes = std::fs::read(&vp).unwrap();
    let reencoded = match mvol::decode(&bytes).unwrap() {
        MvolData::Hu(v) => mvol::encode_volume(&v).unwrap(),
        MvolData::Labels(_) => Vec::new(),
    };
    if !same_v || !same_l || reencoded != bytes {
        failures.push("mvol round trip");
    }

    let cfg = pipeline_config(&spec);
    let none = ScribbleSet::default();
    let seeds = [SeedPoint { frame: 0, x: 64, y: 64 }];
    let mut prev: Option<LabelVolume> = None;
    for stage in Stage::ALL {
        let run = || run_stage(stage, &a.volume, prev.as_ref(), &cfg, &none, &seeds, None);
        let (x, y) = match (run(), run()) {
            (Ok(x), Ok(y)) => (x, y),
            // a seed that misses is still a deterministic outcome
            (Err(e1), Err(e2)) if e1.to_string() == e2.to_string() && stage == Stage::Track => {
                let mut c = cfg.clone();
                c.tracker.auto_init = true;
                let r1 = run_stage(stage, &a.volume, prev.as_ref(), &c, &none, &[], None).unwrap();
                let r2 = run_stage(stage, &a.volume, prev.as_ref(), &c, &none, &[], None).unwrap();
                (r1, r2)
            }
            _ => {
                failures.push(stage.name());
                break;
            }
        };
        if mvol::encode_labels(&x.labels).unwrap() != mvol::encode_labels(&y.labels).unwrap() || x.report != y.report {
            failures.push(stage.name());
        }
        prev = Some(x.labels);
    }

    let cp = ControlPoints::perturbed_grid(128, 128, 6.0, 9);
    let mode = WarpMode::PerFrame(make_warp_steps(&cp.src, &cp.dst, 32).unwrap().set(SetId::Three).unwrap());
    let w1 = segd_core::tps::warp_volume(&a.volume, Some(&a.truth), &mode).unwrap();
    let w2 = segd_core::tps::warp_volume(&a.volume, Some(&a.truth), &mode).unwrap();
    if w1.0.voxels() != w2.0.voxels() || w1.1.unwrap().labels() != w2.1.unwrap().labels() {
        failures.push("warp");
    }
    let e1 = evaluate(prev.as_ref().unwrap(), &a.truth, Label::Body, "x").unwrap().to_csv();
    let e2 = evaluate(prev.as_ref().unwrap(), &a.truth, Label::Body, "x").unwrap().to_csv();
    if e1 != e2 {
        failures.push("evaluation");
    }
    if failures.is_empty() {
        (true, "MVOL bit-exact; phantom, 4 stages, warp and eval reruns byte-identical".into())
    } else {
        (false, format!("differences in: {}", failures.join(", ")))
    }
}

fn main() {
    // `cargo test -- --list` and filters from other targets pass through here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let spec = PhantomSpec::default();
    let phantom = generate(&spec).unwrap();
    let mut base = None;
    let outcomes = [timed("geodesic_oracle", || {
            let t = Instant::now();
            let (ok, d) = geodesic_oracle();
            let s = t.elapsed().as_secs_f64();
            (ok && s < 10.0, format!("{d} (limit 10 s)"))
        }),
        timed("mincut_oracle", || {
            let t = Instant::now();
            let (ok, d) = mincut_oracle();
            let s = t.elapsed().as_secs_f64();
            (ok && s < 30.0, format!("{d} (limit 30 s)"))
        }),
        timed("tps_exactness", || {
            let t = Instant::now();
            let (ok, d) = tps_exactness();
            let s = t.elapsed().as_secs_f64();
            (ok && s < 5.0, format!("{d} (limit 5 s)"))
        }),
        timed("end_to_end_phantom", || end_to_end(&phantom, &spec, &mut base)),
        timed("ablation_direction", ablation),
        timed("warp_robustness", || warp_robustness(&phantom, &spec, base)),
        timed("preprocess_exactness", || preprocess_exactness(&phantom, &spec)),
        timed("format_determinism", format_and_determinism)];
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
