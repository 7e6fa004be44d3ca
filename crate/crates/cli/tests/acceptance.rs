//! Acceptance suite. Prints one `A<n> PASS|FAIL` line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::Instant;

use rand::Rng;
use serde_json::{json, Value};
use wood_core::imageio::{load_gray, load_mask, GrayImage, LabelMask};
use wood_core::localization::evaluate_seeds;
use wood_core::loss::kmeans::{fit, squared_distance};
use wood_core::loss::{
    build_in_clusters, build_ood_clusters_kmeans, distance, loss_cls, loss_cls_batch, loss_d, select_nearest_ood,
    total_loss, ClusterKind, ClusterSet, InSample, LossFlags, Objective, OodTarget, WoodHyperparams,
};
use wood_core::manifest::{load_manifest, resolve};
use wood_core::net::checkpoint::load_classifier;
use wood_core::net::{self, Architecture, ClassifierState, ConvSpec, FeatureMap, ForwardResult, OutputGrad};
use wood_core::oodpipe::{
    assemble_hard_ood, expected_reviews, load_ranked, rank_candidates, simulate_reviews, ReviewDecision, Verdict,
};
use wood_core::rng::{stream, Stream};
use wood_core::runner::{
    ablation_flags, refresh_clusters, sweep_ood_count_with_baseline, train_run, Dataset, ExperimentConfig,
    RunReport, Sample, TrainSettings, ABLATION_ROWS,
};
use wood_core::stats::median;
use wood_core::synth::{generate, GenSpec, TEST_MANIFEST, TRAIN_MANIFEST};
use wood_core::{ClassList, Manifest, Split};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- A1

fn tiny_arch() -> Architecture {
    let conv = |out_channels, stride| ConvSpec { out_channels, stride };
    Architecture {
        input_size: 8,
        in_channels: 1,
        convs: vec![conv(2, 2), conv(4, 2), conv(4, 1)],
        num_classes: 2,
    }
}

type LossFn<'a> = dyn Fn(&[ForwardResult]) -> wood_core::Result<(f64, Vec<OutputGrad>)> + 'a;

fn max_rel_error(state: &ClassifierState, images: &[&GrayImage], loss: &LossFn<'_>) -> Result<f64, String> {
    const EPS: f64 = 1e-4;
    let (_, grads) = ok(net::grad(state, images, |f| loss(f)))?;
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data.iter().copied()).collect();
    let base = state.flat_params();
    let value = |p: &[f64]| -> Result<f64, String> {
        let mut probe = state.clone();
        ok(probe.set_flat_params(p))?;
        let fwds: Vec<ForwardResult> = images.iter().map(|i| probe.forward(i)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        Ok(ok(loss(&fwds))?.0)
    };
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + EPS;
        let up = value(&p)?;
        p[i] = base[i] - EPS;
        let down = value(&p)?;
        let numeric = (up - down) / (2.0 * EPS);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale < 1e-10 {
            continue;
        }
        nonzero += 1;
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    ensure!(nonzero > base.len() / 2, "only {nonzero} of {} gradients nonzero", base.len());
    Ok(worst)
}

fn a1() -> Outcome {
    let started = Instant::now();
    let mut rng = stream(13, Stream::Init, 0);
    let state = ok(ClassifierState::init(tiny_arch(), &mut rng))?;
    let params = state.num_params();
    ensure!(params <= 500, "{params} parameters");
    let images_in: Vec<GrayImage> = (0..4).map(|_| net::random_image(8, &mut rng)).collect();
    let labels: Vec<Vec<u8>> = vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 1]];
    let images_ood: Vec<GrayImage> = (0..6).map(|_| net::random_image(8, &mut rng)).collect();
    let classes = ok(ClassList::new(["a", "b"]))?;
    let fin: Vec<ForwardResult> = images_in.iter().map(|i| state.forward(i).unwrap()).collect();
    let pairs: Vec<(&[f64], &[u8])> = fin.iter().zip(&labels).map(|(f, y)| (f.z.as_slice(), y.as_slice())).collect();
    let pin = ok(build_in_clusters(&pairs, &classes))?;
    let food: Vec<ForwardResult> = images_ood.iter().map(|i| state.forward(i).unwrap()).collect();
    let zs: Vec<&[f64]> = food.iter().map(|f| f.z.as_slice()).collect();
    let pood = ok(build_ood_clusters_kmeans(&zs, 4, 13))?;
    let all: Vec<&GrayImage> = images_in.iter().chain(&images_ood).collect();
    let only_in: Vec<&GrayImage> = images_in.iter().collect();
    let n_in = images_in.len();

    let cls = |f: &[ForwardResult]| -> wood_core::Result<(f64, Vec<OutputGrad>)> {
        let (fi, fo) = f.split_at(n_in);
        let si: Vec<&[f64]> = fi.iter().map(|r| r.scores.as_slice()).collect();
        let yi: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
        let so: Vec<&[f64]> = fo.iter().map(|r| r.scores.as_slice()).collect();
        let l = loss_cls_batch(&si, &yi, &so, 2, OodTarget::Zero)?;
        let seeds = l
            .d_logits_in
            .iter()
            .chain(&l.d_logits_ood)
            .map(|g| OutputGrad {
                d_scores: vec![0.0; 2],
                d_logits: g.clone(),
                d_z: vec![0.0; 4],
            })
            .collect();
        Ok((l.value(), seeds))
    };
    let dist = |f: &[ForwardResult]| -> wood_core::Result<(f64, Vec<OutputGrad>)> {
        let b = f.len() as f64;
        let mut value = 0.0;
        let mut seeds = Vec::new();
        for (r, y) in f.iter().zip(&labels) {
            let d = loss_d(&r.z, y, &pin, Some(&pood), 50.0)?;
            value += d.value() / b;
            let mut g = OutputGrad::zeros(2, 4);
            g.d_z = d.grad().iter().map(|v| v / b).collect();
            seeds.push(g);
        }
        Ok((value, seeds))
    };
    let obj = Objective {
        hp: WoodHyperparams::default(),
        flags: LossFlags::ALL,
        ood_target: OodTarget::Zero,
    };
    ensure!(obj.hp.lambda == 0.007, "default lambda {}", obj.hp.lambda);
    let total = |f: &[ForwardResult]| -> wood_core::Result<(f64, Vec<OutputGrad>)> {
        let (fi, fo) = f.split_at(n_in);
        let batch: Vec<InSample<'_>> = fi.iter().zip(&labels).map(|(r, y)| InSample { forward: r, labels: y }).collect();
        let ood: Vec<&ForwardResult> = fo.iter().collect();
        Ok(total_loss(&batch, &ood, Some(&pin), Some(&pood), &obj)?.into_seeds())
    };
    let e_cls = max_rel_error(&state, &all, &cls)?;
    let e_d = max_rel_error(&state, &only_in, &dist)?;
    let e_total = max_rel_error(&state, &all, &total)?;
    let secs = started.elapsed().as_secs_f64();
    let worst = e_cls.max(e_d).max(e_total);
    ensure!(worst <= 1e-4, "max relative error cls {e_cls:.2e} d {e_d:.2e} total {e_total:.2e}");
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "{params} params, max rel err cls {e_cls:.1e} d {e_d:.1e} total {e_total:.1e}, {secs:.1} s"
    ))
}

// ---------------------------------------------------------------- A2

fn cluster_set(kind: ClusterKind, centers: Vec<Vec<f64>>) -> ClusterSet {
    let k = centers.len();
    ClusterSet {
        kind,
        dim: centers[0].len(),
        centers,
        sizes: vec![1; k],
        class_of: vec![None; k],
        skipped_classes: vec![],
    }
}

fn fake_forward(scores: Vec<f64>, z: Vec<f64>) -> ForwardResult {
    ForwardResult {
        logits: scores.iter().map(|p| (p / (1.0 - p)).ln()).collect(),
        scores,
        feature_map: FeatureMap {
            height: 1,
            width: 1,
            channels: z.len(),
            data: z.clone(),
        },
        z,
    }
}

fn a2() -> Outcome {
    let want_cls = 2.0 * std::f64::consts::LN_2;
    let cls = ok(loss_cls(&[0.5, 0.5], &[1, 0], Some(&[0.5, 0.5])))?;
    ensure!((cls - want_cls).abs() <= 1e-9, "L_cls = {cls}");

    let pin = cluster_set(ClusterKind::InDistClassMeans, vec![vec![2.0, 0.0], vec![0.0, 100.0]]);
    let mut ood = vec![vec![5.0, 0.0], vec![0.0, 7.0]];
    ood.extend((0..8).map(|i| vec![-50.0 - i as f64, 0.0]));
    let pood = cluster_set(ClusterKind::OodKmeans, ood);
    let d = ok(loss_d(&[0.0, 0.0], &[1, 0], &pin, Some(&pood), 20.0))?;
    ensure!((d.value() + 10.0).abs() <= 1e-9, "L_d = {}", d.value());

    let fin = fake_forward(vec![0.5, 0.5], vec![0.0, 0.0]);
    let food = fake_forward(vec![0.5, 0.5], vec![3.0, 3.0]);
    let obj = Objective {
        hp: WoodHyperparams::default(),
        flags: LossFlags::ALL,
        ood_target: OodTarget::Zero,
    };
    let batch = [InSample {
        forward: &fin,
        labels: &[1, 0],
    }];
    let t = ok(total_loss(&batch, &[&food], Some(&pin), Some(&pood), &obj))?;
    let l = t.breakdown.total;
    ensure!((l - (want_cls - 0.07)).abs() <= 1e-9, "L = {l}");
    ensure!((l - 1.316294).abs() <= 5e-7, "L = {l} vs 1.316294");
    Ok(format!("L_cls {cls:.9}, L_d {:.9}, L {l:.9}", d.value()))
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let points = [vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
    let inertia = |assign: &[usize]| -> f64 {
        let mut total = 0.0;
        for c in 0..2 {
            let members: Vec<&Vec<f64>> = points.iter().zip(assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                return f64::INFINITY;
            }
            let mean: Vec<f64> = (0..2).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            total += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
        }
        total
    };
    let mut best = (f64::INFINITY, vec![]);
    for mask in 0u32..16 {
        let assign: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
        let v = inertia(&assign);
        if v < best.0 {
            best = (v, assign);
        }
    }
    let same_partition = |a: &[usize], b: &[usize]| (0..4).all(|i| (0..4).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let f = ok(fit(&refs, 2, 0))?;
    ensure!(same_partition(&f.assignments, &best.1), "partition {:?} vs optimum {:?}", f.assignments, best.1);
    ensure!((f.inertia() - best.0).abs() < 1e-12, "inertia {} vs {}", f.inertia(), best.0);

    let mut rng = stream(3, Stream::Subset, 0);
    for trial in 0..100 {
        let n = rng.random_range(5..40);
        let dim = rng.random_range(1..5);
        let k = rng.random_range(1..6usize).min(n);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let f = ok(fit(&refs, k, trial))?;
        for w in f.inertia_history.windows(2) {
            ensure!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "trial {trial}: inertia rose {:?}", f.inertia_history);
        }
    }
    Ok(format!("optimum inertia {:.1} recovered; 100 random instances monotone", best.0))
}

// ---------------------------------------------------------------- A4

fn a4() -> Outcome {
    let mut rng = stream(4, Stream::Subset, 0);
    let check = |z: &[f64], centers: &[Vec<f64>], tau: f64| -> Result<usize, String> {
        let k = centers.len();
        let picked = ok(select_nearest_ood(z, &cluster_set(ClusterKind::OodKmeans, centers.to_vec()), tau))?;
        let want = ((tau * k as f64 / 100.0 + 1e-9).floor() as usize).max(1);
        ensure!(picked.len() == want, "K={k} tau={tau}: {} selected, expected {want}", picked.len());
        let d: Vec<f64> = centers.iter().map(|c| distance(z, c).unwrap()).collect();
        let far = picked.iter().map(|&i| d[i]).fold(f64::NEG_INFINITY, f64::max);
        for (i, &di) in d.iter().enumerate() {
            ensure!(picked.contains(&i) || far <= di, "excluded cluster {i} is nearer");
        }
        Ok(picked.len())
    };
    for _ in 0..1000 {
        let k = rng.random_range(1..80);
        let dim = rng.random_range(1..8);
        let tau = rng.random_range(1..=100) as f64;
        let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        check(&z, &centers, tau)?;
    }
    let centers: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 1.0]).collect();
    let n = check(&[0.0, 0.0], &centers, 20.0)?;
    ensure!(n == 10, "(tau=20, K=50) selected {n}");
    Ok("1000 random instances exact; (tau=20, K=50) -> 10".into())
}

// ---------------------------------------------------------------- A5

fn a5(pool: &[bool], r: f64) -> Outcome {
    let e = ok(expected_reviews(100.0, 0.2))?;
    ensure!(e == 125.0, "expected_reviews(100, 0.2) = {e}");
    let mut rng = stream(5, Stream::Subset, 0);
    let sim = ok(simulate_reviews(pool, 20, 10_000, &mut rng))?;
    ensure!(sim.positive_rate == r, "pool rate {} vs {r}", sim.positive_rate);
    ensure!(sim.relative_error() <= 0.05, "relative error {:.4}", sim.relative_error());
    Ok(format!(
        "125 exact; r={r}: simulated {:.3} vs {:.3} reviews (err {:.2}%)",
        sim.mean_reviews,
        sim.expected,
        100.0 * sim.relative_error()
    ))
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let mut rng = stream(6, Stream::Subset, 0);
    for trial in 0..1000 {
        let nc = rng.random_range(1..4);
        let classes = ok(ClassList::new((0..nc).map(|c| format!("k{c}"))))?;
        let (w, h) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let mut mask = || LabelMask {
            width: w,
            height: h,
            data: (0..w * h).map(|_| rng.random_range(0..=nc) as u8).collect(),
        };
        let (pred, gt) = (mask(), mask());
        let m = ok(evaluate_seeds(&[(&pred, &gt)], &classes))?;
        let mut ious = Vec::new();
        for c in 0..=nc as u8 {
            let inter = pred.data.iter().zip(&gt.data).filter(|(&p, &g)| p == c && g == c).count();
            let union = pred.data.iter().zip(&gt.data).filter(|(&p, &g)| p == c || g == c).count();
            let iou = (union > 0).then(|| inter as f64 / union as f64);
            ensure!(m.classes[c as usize].iou == iou, "trial {trial} class {c}");
            ious.extend(iou);
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        ensure!(m.miou == miou, "trial {trial}: mIoU {} vs {miou}", m.miou);
        let both = pred.data.iter().zip(&gt.data).filter(|(&p, &g)| p != 0 && g != 0).count();
        let pf = pred.data.iter().filter(|&&p| p != 0).count();
        let gf = gt.data.iter().filter(|&&g| g != 0).count();
        let p = if pf == 0 { 0.0 } else { both as f64 / pf as f64 };
        let r = if gf == 0 { 0.0 } else { both as f64 / gf as f64 };
        ensure!(m.precision == p && m.recall == r, "trial {trial}: precision/recall");
    }
    let classes = ok(ClassList::new(["a"]))?;
    let pred = LabelMask {
        width: 2,
        height: 2,
        data: vec![1, 1, 0, 0],
    };
    let gt = LabelMask {
        width: 2,
        height: 2,
        data: vec![1, 0, 1, 0],
    };
    let m = ok(evaluate_seeds(&[(&pred, &gt)], &classes))?;
    ensure!((m.miou - 1.0 / 3.0).abs() < 1e-15, "2x2 mIoU {}", m.miou);
    ensure!((m.f1 - 0.5).abs() < 1e-15, "2x2 F1 {}", m.f1);
    Ok("1000 random pairs exact; 2x2 case mIoU 1/3, F1 0.5".into())
}

// ---------------------------------------------------------------- A7-A9

struct SeedRuns {
    seed: u64,
    runs: Vec<(String, RunReport)>,
    data: Dataset,
}

impl SeedRuns {
    fn report(&self, row: &str) -> &RunReport {
        &self.runs.iter().find(|(r, _)| r == row).unwrap().1
    }
}

struct Benchmark {
    dir: PathBuf,
    cfg: ExperimentConfig,
    seeds: Vec<SeedRuns>,
    wall: f64,
}

fn benchmark_spec() -> GenSpec {
    GenSpec {
        image_size: 32,
        n_in: 500,
        n_ood_candidate: 100,
        n_test: 50,
        correlation_rate: 0.95,
        contamination: 0.1,
        rng_seed: 1,
        ..GenSpec::default()
    }
}

/// Reviewer that answers from the ground-truth masks.
fn simulated_decisions(
    ranked: &[wood_core::oodpipe::RankedCandidate],
    train: &Manifest,
    manifest_path: &Path,
) -> Vec<ReviewDecision> {
    ranked
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rec = train.get(&r.sample_id).unwrap();
            let mask = load_mask(resolve(manifest_path, rec.gt_mask_path.as_ref().unwrap())).unwrap();
            ReviewDecision {
                sample_id: r.sample_id.clone(),
                class_name: r.class_name.clone(),
                verdict: if mask.foreground_pixels() > 0 {
                    Verdict::ContainsForeground
                } else {
                    Verdict::BackgroundOnly
                },
                annotator_id: "sim".into(),
                timestamp: i as u64,
            }
        })
        .collect()
}

fn run_benchmark(dir: &Path) -> Result<Benchmark, String> {
    let started = Instant::now();
    ok(generate(&benchmark_spec(), dir))?;
    let mpath = dir.join(TRAIN_MANIFEST);
    let train = ok(load_manifest(&mpath))?;
    let mut cfg = ExperimentConfig::new(&mpath, dir.join("out"));
    cfg.test_manifest = Some(dir.join(TEST_MANIFEST));
    let base = ok(Dataset::load(&cfg))?;
    let candidates: Vec<_> = train.by_split(Split::OodCandidate).cloned().collect();
    let mut seeds = Vec::new();
    for seed in 0..5u64 {
        let baseline = TrainSettings {
            rng_seed: seed,
            flags: LossFlags::BASELINE,
            ..cfg.train.clone()
        };
        let (state, report_a) = ok(train_run(&base.view(), &baseline, "(a)"))?;
        let ranked = ok(rank_candidates(&state, &candidates, &train.classes, &mpath))?;
        let decisions = simulated_decisions(&ranked, &train, &mpath);
        let hard = ok(assemble_hard_ood(&ranked, &decisions, train.num_classes()))?;
        ensure!(hard.len() >= 20, "seed {seed}: only {} hard-OoD images", hard.len());
        let mut data = base.clone();
        data.ood = hard
            .iter()
            .take(20)
            .map(|r| Sample {
                id: r.id.clone(),
                image: load_gray(&r.path).unwrap(),
                labels: r.labels.clone(),
            })
            .collect();
        let mut runs = vec![("a".to_string(), report_a)];
        for (row, flags) in ABLATION_ROWS.iter().skip(1) {
            let s = TrainSettings { flags: *flags, ..baseline.clone() };
            let (_, rep) = ok(train_run(&data.view(), &s, &format!("({row})")))?;
            runs.push((row.to_string(), rep));
        }
        let a = &runs[0].1;
        let f = &runs[5].1;
        eprintln!(
            "seed {seed}: (a) mIoU {:.3} precision {:.3} | (f) mIoU {:.3} precision {:.3}",
            a.miou(),
            a.precision(),
            f.miou(),
            f.precision()
        );
        seeds.push(SeedRuns { seed, runs, data });
    }
    Ok(Benchmark {
        dir: dir.to_path_buf(),
        cfg,
        seeds,
        wall: started.elapsed().as_secs_f64(),
    })
}

fn a7(b: &Benchmark) -> Outcome {
    let col = |row: &str, m: fn(&RunReport) -> f64| b.seeds.iter().map(|s| m(s.report(row))).collect::<Vec<_>>();
    let p_a = median(&col("a", RunReport::precision));
    let p_f = median(&col("f", RunReport::precision));
    let m_a = median(&col("a", RunReport::miou));
    let m_f = median(&col("f", RunReport::miou));
    let gain = 100.0 * (p_f - p_a);
    let summary = format!(
        "median precision {:.1} -> {:.1} ({gain:+.1} pts), median mIoU {:.1} -> {:.1}, {:.0} s",
        100.0 * p_a,
        100.0 * p_f,
        100.0 * m_a,
        100.0 * m_f,
        b.wall
    );
    ensure!(gain >= 5.0, "{summary}");
    ensure!(m_f > m_a, "{summary}");
    ensure!(b.wall <= 1800.0, "{summary}");
    Ok(summary)
}

fn a8(b: &Benchmark) -> Outcome {
    for s in &b.seeds {
        ensure!(s.runs.len() == 6, "seed {}: {} rows ran", s.seed, s.runs.len());
    }
    // Per-batch decomposition on the trained (f) classifier of the first seed.
    let s0 = &b.seeds[0];
    let view = s0.data.view();
    let settings = TrainSettings {
        flags: LossFlags::ALL,
        rng_seed: s0.seed,
        ..b.cfg.train.clone()
    };
    let (state, _) = ok(train_run(&view, &settings, "(f)"))?;
    let clusters = ok(refresh_clusters(&state, &view, &settings, 0))?;
    let fin: Vec<ForwardResult> = view.train_in.iter().map(|x| state.forward(&x.image).unwrap()).collect();
    let food: Vec<ForwardResult> = view.ood.iter().map(|x| state.forward(&x.image).unwrap()).collect();
    let mut worst = 0.0f64;
    let mut batches = 0;
    for (bi, chunk) in (0..fin.len()).collect::<Vec<_>>().chunks(settings.batch_in).take(8).enumerate() {
        let batch: Vec<InSample<'_>> = chunk
            .iter()
            .map(|&i| InSample {
                forward: &fin[i],
                labels: &view.train_in[i].labels,
            })
            .collect();
        let ood: Vec<&ForwardResult> = (0..settings.batch_ood).map(|j| &food[(bi * settings.batch_ood + j) % food.len()]).collect();
        let eval = |flags: LossFlags| {
            let obj = Objective {
                hp: settings.hp,
                flags,
                ood_target: settings.ood_target,
            };
            total_loss(&batch, &ood, clusters.pin.as_ref(), clusters.pood.as_ref(), &obj)
                .map(|t| t.breakdown)
                .map_err(|e| e.to_string())
        };
        let full = eval(LossFlags::ALL)?;
        ensure!(full.d_attract > 0.0 && full.d_repel > 0.0 && full.cls_ood > 0.0, "degenerate batch {bi}");
        for (row, flags) in ABLATION_ROWS.iter() {
            let partial = eval(*flags)?;
            let mut removed = 0.0;
            if !flags.cls_on_ood {
                removed += full.cls_ood;
            }
            if !flags.d_on_in {
                removed += full.lambda * full.d_attract;
            }
            if !flags.d_on_ood {
                removed -= full.lambda * full.d_repel;
            }
            let err = (full.total - partial.total - removed).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-9, "batch {bi} row ({row}): L(f) - L = {} but removed terms sum to {removed}", full.total - partial.total);
        }
        batches += 1;
    }
    let wins = b.seeds.iter().filter(|s| s.report("f").miou() >= s.report("a").miou()).count();
    ensure!(wins >= 4, "mIoU(f) >= mIoU(a) in only {wins}/5 seeds");
    ensure!(ablation_flags("f") == Some(LossFlags::ALL), "row (f) is not the full objective");
    Ok(format!(
        "6 rows x 5 seeds ran; decomposition over {batches} batches max err {worst:.1e}; mIoU(f) >= mIoU(a) in {wins}/5 seeds"
    ))
}

fn a9(b: &Benchmark) -> Outcome {
    let s0 = &b.seeds[0];
    let mut cfg = b.cfg.clone();
    cfg.out_dir = b.dir.join("sweep");
    cfg.train.flags = LossFlags::ALL;
    cfg.train.rng_seed = s0.seed;
    let nc = s0.data.classes.len();
    cfg.sweep_ood = vec![nc, 5, 10, s0.data.ood.len()];
    cfg.repeats = 5;
    let sweep = ok(sweep_ood_count_with_baseline(&s0.data, &cfg, Some(s0.report("a"))))?;
    let one_per_class = sweep.point(nc).unwrap();
    let med = median(&one_per_class.miou);
    let vars: Vec<String> = sweep.points.iter().map(|p| format!("{}:{:.2e}", p.n, p.variance)).collect();
    let summary = format!(
        "|D_ood|={nc}: median mIoU {:.1} vs baseline {:.1}; variance {}; Spearman {:.2}",
        100.0 * med,
        100.0 * sweep.baseline_miou,
        vars.join(" "),
        sweep.variance_trend
    );
    ensure!(med > sweep.baseline_miou, "{summary}");
    ensure!(sweep.variance_trend < 0.0, "{summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- A10

fn wood(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_wood"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output())?;
    ensure!(
        out.status.success(),
        "wood {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> Result<(u16, Value), String> {
    let mut stream = ok(TcpStream::connect(addr))?;
    let body = body.map(Value::to_string).unwrap_or_default();
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
        body.len()
    );
    ok(stream.write_all(head.as_bytes()))?;
    ok(stream.write_all(body.as_bytes()))?;
    let mut raw = Vec::new();
    ok(stream.read_to_end(&mut raw))?;
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or("no header end")?;
    let head = String::from_utf8_lossy(&raw[..split]).to_lowercase();
    let status: u16 = head.split(' ').nth(1).and_then(|s| s.parse().ok()).ok_or("bad status line")?;
    let mut data = raw[split + 4..].to_vec();
    if head.contains("transfer-encoding: chunked") {
        let mut out = Vec::new();
        let mut rest = data.as_slice();
        loop {
            let eol = rest.windows(2).position(|w| w == b"\r\n").ok_or("bad chunk")?;
            let size = usize::from_str_radix(std::str::from_utf8(&rest[..eol]).unwrap().trim(), 16).map_err(|e| e.to_string())?;
            if size == 0 {
                break;
            }
            out.extend_from_slice(&rest[eol + 2..eol + 2 + size]);
            rest = &rest[eol + 4 + size..];
        }
        data = out;
    }
    let value = if data.is_empty() { Value::Null } else { ok(serde_json::from_slice(&data))? };
    Ok((status, value))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn a10() -> Outcome {
    let tmp = ok(tempfile::tempdir())?;
    let dir = tmp.path();
    std::fs::write(
        dir.join("gen.cfg"),
        "image_size = 32\nn_in = 60\nn_ood_candidate = 40\nn_test = 10\ncontamination = 0.2\nrng_seed = 2\n",
    )
    .unwrap();
    wood(&["gen", "-c", "gen.cfg", "--out", "data"], dir)?;
    std::fs::write(
        dir.join("train.cfg"),
        "train_manifest = data/manifest.jsonl\ntest_manifest = data/test.jsonl\nout_dir = run1\nepochs = 4\nrng_seed = 9\n",
    )
    .unwrap();
    wood(&["train", "-c", "train.cfg"], dir)?;
    wood(&["train", "-c", "train.cfg", "--set", "out_dir=run2"], dir)?;
    let report = |run: &str| -> Result<Value, String> {
        let mut v: Value = ok(serde_json::from_str(&ok(std::fs::read_to_string(dir.join(run).join("report.json")))?))?;
        v.as_object_mut().ok_or("report is not an object")?.remove("wall_time_s");
        Ok(v)
    };
    ensure!(report("run1")? == report("run2")?, "reruns with the same config and seed differ");

    wood(&["rank", "--model", "run1/model.wtsr", "--manifest", "data/manifest.jsonl", "--out", "ranked.jsonl"], dir)?;
    let mpath = dir.join("data").join(TRAIN_MANIFEST);
    let train = ok(load_manifest(&mpath))?;
    let state = ok(load_classifier(dir.join("run1/model.wtsr")))?;
    let ranked = ok(load_ranked(dir.join("ranked.jsonl")))?;
    let mut want = BTreeSet::new();
    let mut pruned = 0;
    for rec in train.by_split(Split::OodCandidate) {
        let scores = ok(state.forward(&ok(load_gray(resolve(&mpath, &rec.path)))?))?.scores;
        for (c, name) in train.classes.names().iter().enumerate() {
            if scores[c] >= 0.5 {
                want.insert((rec.id.clone(), name.clone(), scores[c].to_bits()));
            } else {
                pruned += 1;
            }
        }
    }
    let got: BTreeSet<_> = ranked.iter().map(|r| (r.sample_id.clone(), r.class_name.clone(), r.score.to_bits())).collect();
    ensure!(got.len() == ranked.len() && got == want, "ranked set differs from the p(c) >= 0.5 scan");
    ensure!(!ranked.is_empty(), "no candidate survived the threshold");

    let mut child = ok(Command::new(env!("CARGO_BIN_EXE_wood"))
        .args(["serve-review", "--port", "0", "--candidates", "ranked.jsonl", "--log", "log.jsonl"])
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn())?;
    let stdout = child.stdout.take().ok_or("no stdout")?;
    let server = Server(child);
    let mut line = String::new();
    ok(BufReader::new(stdout).read_line(&mut line))?;
    let addr: SocketAddr = ok(line
        .trim()
        .strip_prefix("listening on http://")
        .ok_or(format!("unexpected banner `{line}`"))?
        .parse())?;

    let mut posts = 0;
    let mut background = BTreeSet::new();
    let mut foreground = BTreeSet::new();
    loop {
        let (status, batch) = http(addr, "GET", "/batch?annotator=script&size=7", None)?;
        ensure!(status == 200, "GET /batch returned {status}");
        let items = batch["items"].as_array().cloned().unwrap_or_default();
        for item in &items {
            let id = item["sample_id"].as_str().unwrap().to_string();
            let rec = train.get(&id).ok_or("unknown id in batch")?;
            let clean = ok(load_mask(resolve(&mpath, rec.gt_mask_path.as_ref().unwrap())))?.foreground_pixels() == 0;
            let verdict = if clean { "background_only" } else { "contains_foreground" };
            let send = |v: &str| {
                http(
                    addr,
                    "POST",
                    "/decision",
                    Some(&json!({"sample_id": id, "class_name": item["class_name"], "verdict": v, "annotator_id": "script"})),
                )
            };
            if posts % 5 == 0 {
                // A slip corrected right away; the later line wins.
                let wrong = if clean { "contains_foreground" } else { "background_only" };
                let (s, _) = send(wrong)?;
                ensure!(s == 200, "POST /decision returned {s}");
                posts += 1;
            }
            let (s, _) = send(verdict)?;
            ensure!(s == 200, "POST /decision returned {s}");
            posts += 1;
            if clean {
                background.insert(id);
            } else {
                foreground.insert(id);
            }
        }
        if batch["done"].as_bool() == Some(true) || items.is_empty() {
            break;
        }
    }
    drop(server);
    let log_lines = ok(std::fs::read_to_string(dir.join("log.jsonl")))?.lines().count();
    ensure!(log_lines == posts, "{posts} decisions posted but the log has {log_lines} lines");

    wood(
        &["build-hard-ood", "--candidates", "ranked.jsonl", "--log", "log.jsonl", "--manifest", "data/manifest.jsonl", "--out", "hard.jsonl"],
        dir,
    )?;
    let hard = ok(load_manifest(dir.join("hard.jsonl")))?;
    let ids: BTreeSet<String> = hard.records.iter().map(|r| r.id.clone()).collect();
    ensure!(ids.len() == hard.records.len(), "duplicate hard-OoD records");
    ensure!(hard.records.iter().all(|r| r.split == Split::OodHard), "record with the wrong split");
    let queued: BTreeSet<String> = ranked.iter().map(|r| r.sample_id.clone()).collect();
    ensure!(background.union(&foreground).cloned().collect::<BTreeSet<_>>() == queued, "review did not cover the queue");
    ensure!(ids == background, "hard-OoD set {ids:?} differs from background_only set {background:?}");
    Ok(format!(
        "{} ranked ({pruned} pruned), {posts} decisions, {} hard-OoD = background_only set; reruns identical",
        ranked.len(),
        ids.len()
    ))
}

// ----------------------------------------------------------------

fn report(id: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail, pass) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("{id} {tag} [{secs:.1} s] {detail}");
    let _ = std::io::stdout().flush();
    pass
}

fn main() -> ExitCode {
    let mut pass = true;
    pass &= report("A1", a1);
    pass &= report("A2", a2);
    pass &= report("A3", a3);
    pass &= report("A4", a4);

    let work = tempfile::tempdir().expect("tempdir");
    let bench = catch_unwind(AssertUnwindSafe(|| run_benchmark(work.path())))
        .unwrap_or_else(|_| Err("benchmark panicked".into()));

    pass &= report("A5", || {
        let mpath = work.path().join(TRAIN_MANIFEST);
        let train = ok(load_manifest(&mpath))?;
        let pool: Vec<bool> = train
            .by_split(Split::OodCandidate)
            .map(|r| load_mask(resolve(&mpath, r.gt_mask_path.as_ref().unwrap())).unwrap().foreground_pixels() > 0)
            .collect();
        a5(&pool, benchmark_spec().contamination)
    });
    pass &= report("A6", a6);
    match &bench {
        Ok(b) => {
            pass &= report("A7", || a7(b));
            pass &= report("A8", || a8(b));
            pass &= report("A9", || a9(b));
        }
        Err(e) => {
            for id in ["A7", "A8", "A9"] {
                pass &= report(id, || Err(format!("benchmark failed: {e}")));
            }
        }
    }
    pass &= report("A10", a10);
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
