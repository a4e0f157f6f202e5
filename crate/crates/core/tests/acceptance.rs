//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use stainalign::datamodel::{sample_patches, save_bundle, synth_generate, CLASS_TASK};
use stainalign::eval::{c_index, few_shot, macro_auc, prototype_classify, FewShotProtocol, ProbeConfig, PROTOTYPE_AUC};
use stainalign::losses::{gromov_wasserstein, gw_cost_with_plan, info_nce_pair, wasserstein, GwLoss, StainGraph};
use stainalign::trainer::{gradcheck, gradcheck_encoder, lr_at, rankme, rankme_embeddings, train, GradcheckConfig};
use stainalign::{
    ContrastiveConfig, Dataset, EncoderConfig, EncoderParams, GotConfig, LossMode, Matrix, PatchEmbeddingBag,
    PretrainConfig, RankMeConfig, Rng, StainId, SyntheticConfig, TrainConfig, TransportPlan,
};

type Verdict = (bool, String);

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

// ---------------------------------------------------------------- gradients

fn gradients() -> Verdict {
    let t = Instant::now();
    let enc = gradcheck_encoder();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    let mut params = 0;
    for mode in [LossMode::Mse, LossMode::InfoNce, LossMode::Intra, LossMode::InfoNceGot] {
        let r = gradcheck(&enc, mode, &GradcheckConfig::default(), &mut Rng::new(0)).expect("gradcheck runs");
        ok &= r.passed && r.n_params <= 1000;
        worst = worst.max(r.max_rel_error);
        params = r.n_params;
    }
    let secs = t.elapsed().as_secs_f64();
    (ok && worst < 1e-4 && secs < 60.0, format!("max rel error {worst:.2e} over {params} params, {secs:.1}s"))
}

// ---------------------------------------------------------------- transport

/// Exact transport cost by enumerating the basic feasible solutions of the
/// transportation polytope.
fn lp_optimum(cost: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = cost.shape();
    let basis = n + m - 1;
    let cells = n * m;
    let mut best = f64::INFINITY;
    let mut pick = vec![0usize; basis];
    fn next(pick: &mut [usize], cells: usize) -> bool {
        let k = pick.len();
        for i in (0..k).rev() {
            if pick[i] < cells - k + i {
                pick[i] += 1;
                for j in i + 1..k {
                    pick[j] = pick[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    for (i, p) in pick.iter_mut().enumerate() {
        *p = i;
    }
    loop {
        // rows: n row sums, then the first m - 1 column sums
        let mut sys = vec![vec![0.0; basis + 1]; basis];
        for (v, &cell) in pick.iter().enumerate() {
            let (i, j) = (cell / m, cell % m);
            sys[i][v] = 1.0;
            if j + 1 < m {
                sys[n + j][v] = 1.0;
            }
        }
        for i in 0..n {
            sys[i][basis] = a[i];
        }
        for j in 0..m - 1 {
            sys[n + j][basis] = b[j];
        }
        if let Some(x) = gauss(sys) {
            if x.iter().all(|&v| v >= -1e-12) {
                let c: f64 = pick.iter().zip(&x).map(|(&cell, v)| v * cost[(cell / m, cell % m)]).sum();
                best = best.min(c);
            }
        }
        if !next(&mut pick, cells) {
            return best;
        }
    }
}

fn gauss(mut s: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = s.len();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| s[x][c].abs().total_cmp(&s[y][c].abs()))?;
        if s[p][c].abs() < 1e-12 {
            return None;
        }
        s.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = s[r][c] / s[c][c];
                for k in c..=n {
                    s[r][k] -= f * s[c][k];
                }
            }
        }
    }
    Some((0..n).map(|i| s[i][n] / s[i][i]).collect())
}

fn cosine_cost(a: &Matrix, b: &Matrix) -> Matrix {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        1.0 - dot / (norm(a.row(i)) * norm(b.row(j)))
    })
}

fn transport() -> Verdict {
    let cfg = GotConfig { sinkhorn_epsilon: 0.005, sinkhorn_iters: 5000, sinkhorn_tol: 1e-9, ..Default::default() };
    let mut rng = Rng::new(2);
    let (mut gap, mut viol, mut closed): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut over = 0;
    for _ in 0..200 {
        let (n, m, d) = (1 + rng.below(4), 1 + rng.below(4), 2 + rng.below(4));
        let (x, y) = (random(n, d, &mut rng), random(m, d, &mut rng));
        let r = wasserstein(&x, &y, &cfg).expect("sinkhorn converges");
        let c = cosine_cost(&x, &y);
        let exact = lp_optimum(&c, &vec![1.0 / n as f64; n], &vec![1.0 / m as f64; m]);
        gap = gap.max((r.cost - exact).abs());
        over += ((r.cost - exact).abs() > 1e-3) as usize;
        viol = viol.max(r.plan.marginal_violation());
        if (n, m) == (2, 2) {
            // the entropic plan puts mass q = sigmoid(-delta / eps) on the
            // anti-diagonal, delta being half the difference of the two
            // permutation costs
            let (diag, anti) = (c[(0, 0)] + c[(1, 1)], c[(0, 1)] + c[(1, 0)]);
            let q = 1.0 / (1.0 + ((anti - diag) / 2.0 / cfg.sinkhorn_epsilon).exp());
            closed = closed.max((r.cost - ((1.0 - q) * diag + q * anti) / 2.0).abs());
        }
    }
    (
        gap <= 1e-3 && viol <= 1e-6,
        format!(
            "max |WD - LP| {gap:.2e} ({over} of 200 above 1e-3), max marginal violation {viol:.2e}, \
             2x2 closed-form entropic optimum matched to {closed:.1e}"
        ),
    )
}

fn graph(nodes: Matrix) -> StainGraph {
    let n = nodes.rows();
    StainGraph::from_nodes(nodes, (0..n).collect(), 0.1).expect("graph builds")
}

fn random_orthogonal(d: usize, rng: &mut Rng) -> Matrix {
    let mut q = random(d, d, rng);
    for i in 0..d {
        for k in 0..i {
            let proj: f64 = (0..d).map(|j| q[(i, j)] * q[(k, j)]).sum();
            for j in 0..d {
                q[(i, j)] -= proj * q[(k, j)];
            }
        }
        let n = q.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    q
}

fn gromov() -> Verdict {
    let cfg = GotConfig { sinkhorn_epsilon: 0.005, sinkhorn_iters: 1000, gw_outer_iters: 30, ..Default::default() };
    let mut rng = Rng::new(3);
    let (mut self_cost, mut rot_cost, mut excess): (f64, f64, f64) = (0.0, 0.0, f64::NEG_INFINITY);
    for _ in 0..20 {
        let v = random(6, 32, &mut rng);
        let g = graph(v.clone());
        self_cost = self_cost.max(gromov_wasserstein(&g, &g, &cfg).expect("gw").cost);
        let rotated = graph(v.matmul(&random_orthogonal(32, &mut rng)).expect("shapes"));
        rot_cost = rot_cost.max(gromov_wasserstein(&g, &rotated, &cfg).expect("gw").cost);
    }
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for _ in 0..200 {
        let d = 2 + rng.below(6);
        let (a, b) = (graph(random(3, d, &mut rng)), graph(random(3, d, &mut rng)));
        let r = gromov_wasserstein(&a, &b, &cfg).expect("gw");
        let best = perms
            .iter()
            .map(|p| {
                let t = Matrix::from_fn(3, 3, |i, j| if p[i] == j { 1.0 / 3.0 } else { 0.0 });
                let plan = TransportPlan { coupling: t, row_marginal: vec![1.0 / 3.0; 3], col_marginal: vec![1.0 / 3.0; 3] };
                gw_cost_with_plan(&a, &b, &plan, GwLoss::Square).expect("cost").0
            })
            .fold(f64::INFINITY, f64::min);
        excess = excess.max(r.cost - best);
    }
    (
        self_cost <= 1e-3 && rot_cost <= 1e-3 && excess <= 1e-3,
        format!("self {self_cost:.2e}, rotated {rot_cost:.2e}, 3-node excess over best permutation {excess:.2e}"),
    )
}

// ---------------------------------------------------------------- infoNCE

fn info_nce_anchors() -> Verdict {
    let cfg = ContrastiveConfig { temperature: 1.0, normalize: false };
    let mut rng = Rng::new(4);
    let single = info_nce_pair(&random(1, 5, &mut rng), &random(1, 5, &mut rng), &cfg).expect("loss").loss;
    let eye = Matrix::identity(2);
    let two = info_nce_pair(&eye, &eye, &cfg).expect("loss").loss;
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let mut symmetric = true;
    for _ in 0..50 {
        let b = 1 + rng.below(6);
        let (x, y) = (random(b, 4, &mut rng), random(b, 4, &mut rng));
        let c = ContrastiveConfig { temperature: 0.1 + rng.uniform(), normalize: rng.bernoulli(0.5) };
        let (xy, yx) = (info_nce_pair(&x, &y, &c).expect("loss"), info_nce_pair(&y, &x, &c).expect("loss"));
        symmetric &= xy.loss == yx.loss && xy.grad_a == yx.grad_b && xy.grad_b == yx.grad_a;
    }
    (
        single == 0.0 && (two - expected).abs() <= 1e-9 && symmetric,
        format!("B=1 {single}, B=2 off by {:.1e}, swap symmetric {symmetric}", (two - expected).abs()),
    )
}

// ---------------------------------------------------------------- RankMe

/// Symmetric eigenvalues by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn rankme_oracle(x: &Matrix, eps: f64) -> f64 {
    let gram = x.t_matmul(x).expect("shapes");
    let rows = (0..gram.rows()).map(|i| gram.row(i).to_vec()).collect();
    let mut ev = jacobi_eigenvalues(rows);
    ev.sort_by(|a, b| b.total_cmp(a));
    // an n x d matrix has min(n, d) singular values
    let sv: Vec<f64> = ev[..x.rows().min(x.cols())].iter().map(|l| l.max(0.0).sqrt()).collect();
    let total: f64 = sv.iter().sum();
    sv.iter().map(|s| s / total + eps).map(|p| -p * p.ln()).sum::<f64>().exp()
}

fn rankme_checks() -> Verdict {
    let cfg = RankMeConfig::default();
    let uniform = rankme(&Matrix::identity(4), &cfg).expect("rankme");
    let rank1 = rankme(&Matrix::from_fn(6, 4, |i, j| (i + 1) as f64 * (j as f64 - 1.5)), &cfg).expect("rankme");
    let mut rng = Rng::new(5);
    let mut diff: f64 = 0.0;
    for _ in 0..100 {
        let (n, d) = (4 + rng.below(8), 2 + rng.below(5));
        let x = random(n, d, &mut rng);
        diff = diff.max((rankme(&x, &cfg).expect("rankme") - rankme_oracle(&x, cfg.epsilon)).abs());
    }
    (
        (uniform - 4.0).abs() <= 1e-3 && (rank1 - 1.0).abs() <= 1e-2 && diff <= 1e-9,
        format!("uniform {uniform:.6}, rank-1 {rank1:.6}, max oracle diff {diff:.1e}"),
    )
}

// ---------------------------------------------------------------- schedule

fn schedule() -> Verdict {
    let cfg = TrainConfig::default();
    let mut ok = true;
    for spe in [1, 3, 7, 20] {
        let warm = cfg.warmup_epochs * spe;
        let last = cfg.max_epochs * spe - 1;
        ok &= lr_at(0, spe, &cfg) == 1e-9;
        ok &= lr_at(warm, spe, &cfg) == 1e-4;
        ok &= lr_at(last, spe, &cfg) == 1e-8;
        // one more warmup increment from the last ramp step lands on the peak
        let slope = (cfg.lr_peak - cfg.lr_start) / warm as f64;
        ok &= (lr_at(warm - 1, spe, &cfg) + slope - lr_at(warm, spe, &cfg)).abs() <= 1e-18;
        ok &= lr_at(warm - 1, spe, &cfg) < lr_at(warm, spe, &cfg) && lr_at(warm + 1, spe, &cfg) < lr_at(warm, spe, &cfg);
    }
    (ok, "start 1e-9, peak 1e-4 at warmup end, final 1e-8".into())
}

// ---------------------------------------------------------------- end to end

fn desk_config(mode: LossMode, seed: u64) -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig {
            d_patch: 32,
            d_se: 8,
            d_hidden: 32,
            d_attn: 16,
            n_heads: 2,
            n_pre_layers: 1,
            post_hidden: 32,
            d_out: 32,
            n_stains: 3,
            ..Default::default()
        },
        train: TrainConfig {
            batch_size: 32,
            max_epochs: 40,
            warmup_epochs: 5,
            lr_peak: 0.01,
            patches_per_bag: 64,
            loss_mode: mode,
            seed,
            ..Default::default()
        },
        contrastive: ContrastiveConfig { temperature: 0.1, normalize: true },
        got: GotConfig { sample_size: 16, sinkhorn_tol: 1e-6, ..Default::default() },
        rankme: RankMeConfig::default(),
    }
}

fn prototype_auc(ds: &Dataset, params: &EncoderParams, enc: &EncoderConfig) -> f64 {
    let emb = rankme_embeddings(&ds.cases, params, enc, &RankMeConfig::default()).expect("embeddings");
    let labels: Vec<usize> = ds.cases.iter().map(|c| c.labels[CLASS_TASK]).collect();
    let protocol = FewShotProtocol { k: 10, n_repeats: 10, seed: 0 };
    let rows = few_shot(CLASS_TASK, &emb, &labels, &protocol, &ProbeConfig::default()).expect("few shot");
    let v: Vec<f64> = rows.iter().filter(|r| r.metric == PROTOTYPE_AUC).map(|r| r.value).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct EndToEnd {
    base: Vec<f64>,
    got: Vec<f64>,
    mse: Vec<f64>,
    got_secs: f64,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn end_to_end() -> EndToEnd {
    let ds = synth_generate(&SyntheticConfig::default()).expect("synthetic bundle");
    let t = Instant::now();
    let mut out = EndToEnd { base: Vec::new(), got: Vec::new(), mse: Vec::new(), got_secs: 0.0 };
    for seed in SEEDS {
        let cfg = desk_config(LossMode::InfoNceGot, seed);
        let init = EncoderParams::init(&cfg.encoder, &mut Rng::new(seed)).expect("init");
        out.base.push(prototype_auc(&ds, &init, &cfg.encoder));
        let run = train(&ds, &cfg, None).expect("training");
        out.got.push(prototype_auc(&ds, run.selected(), &cfg.encoder));
    }
    out.got_secs = t.elapsed().as_secs_f64();
    for seed in SEEDS {
        let cfg = desk_config(LossMode::Mse, seed);
        let run = train(&ds, &cfg, None).expect("training");
        out.mse.push(prototype_auc(&ds, run.selected(), &cfg.encoder));
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn alignment_gain(e: &EndToEnd) -> Verdict {
    let gain = mean(&e.got) - mean(&e.base);
    (
        gain >= 0.10 && e.got_secs < 900.0,
        format!(
            "untrained {:.3?} -> trained {:.3?}, mean gain {gain:.3}, {:.0}s",
            e.base, e.got, e.got_secs
        ),
    )
}

fn ablation(e: &EndToEnd) -> Verdict {
    let (g, m) = (mean(&e.got), mean(&e.mse));
    (g >= m, format!("infonce+got {g:.3} vs mse {m:.3}"))
}

// ---------------------------------------------------------------- metrics

fn pair_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                n += 1.0;
                if scores[i] > scores[j] {
                    s += 1.0;
                } else if scores[i] == scores[j] {
                    s += 0.5;
                }
            }
        }
    }
    s / n
}

fn pair_c_index(risk: &[f64], time: &[f64], event: &[bool]) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..risk.len() {
        for j in 0..risk.len() {
            if i != j && event[i] && time[i] < time[j] {
                n += 1.0;
                if risk[i] > risk[j] {
                    s += 1.0;
                } else if risk[i] == risk[j] {
                    s += 0.5;
                }
            }
        }
    }
    (n > 0.0).then(|| s / n)
}

fn metric_oracles() -> Verdict {
    let mut rng = Rng::new(9);
    let (mut auc_checked, mut auc_bad, mut ci_checked, mut ci_bad) = (0, 0, 0, 0);
    while auc_checked < 1000 {
        let n = 2 + rng.below(11);
        let c = 2 + rng.below(3);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let present: Vec<usize> = (0..c).filter(|k| labels.contains(k)).collect();
        if present.len() < 2 || (c == 2 && present.len() != 2) {
            continue;
        }
        // a coarse grid makes ties common
        let scores = Matrix::from_fn(n, c, |_, _| rng.below(4) as f64 / 4.0);
        let expected = if c == 2 {
            pair_auc(&scores.column(1), &labels.iter().map(|&l| l == 1).collect::<Vec<_>>())
        } else {
            present
                .iter()
                .map(|&k| pair_auc(&scores.column(k), &labels.iter().map(|&l| l == k).collect::<Vec<_>>()))
                .sum::<f64>()
                / present.len() as f64
        };
        auc_checked += 1;
        auc_bad += (macro_auc(&scores, &labels).expect("auc") != expected) as usize;
    }
    while ci_checked < 1000 {
        let n = 2 + rng.below(11);
        let risk: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
        let time: Vec<f64> = (0..n).map(|_| 1.0 + rng.below(6) as f64).collect();
        let event: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
        let Some(expected) = pair_c_index(&risk, &time, &event) else { continue };
        ci_checked += 1;
        ci_bad += (c_index(&risk, &time, &event).expect("c-index") != expected) as usize;
    }
    (
        auc_bad == 0 && ci_bad == 0,
        format!("auc mismatches {auc_bad}/{auc_checked}, c-index mismatches {ci_bad}/{ci_checked}"),
    )
}

// ---------------------------------------------------------------- determinism

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("inside").display().to_string();
                out.push((rel, fs::read(&p).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn small_pretrain(seed: u64, epochs: usize, skip: usize) -> (Dataset, PretrainConfig) {
    let ds = synth_generate(&SyntheticConfig { n_cases: 24, patches_per_bag: [16, 24], d: 8, seed, ..Default::default() })
        .expect("synthetic bundle");
    let mut cfg = desk_config(LossMode::InfoNceGot, seed);
    cfg.encoder = EncoderConfig { d_patch: 8, d_hidden: 8, d_attn: 4, post_hidden: 8, d_out: 6, ..cfg.encoder };
    cfg.train.batch_size = 8;
    cfg.train.max_epochs = epochs;
    cfg.train.warmup_epochs = 2;
    cfg.train.patches_per_bag = 16;
    cfg.train.rankme_skip_epochs = skip;
    cfg.got.sample_size = 8;
    (ds, cfg)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (ds, cfg) = small_pretrain(7, 4, 1);
    let runs: Vec<_> = (0..2)
        .map(|i| {
            let dir = tmp.path().join(format!("run{i}"));
            train(&ds, &cfg, Some(&dir)).expect("training");
            tree_bytes(&dir)
        })
        .collect();
    let bundles: Vec<_> = (0..2)
        .map(|i| {
            let dir = tmp.path().join(format!("bundle{i}"));
            save_bundle(&synth_generate(&SyntheticConfig { n_cases: 30, seed: 3, ..Default::default() }).expect("synth"), &dir)
                .expect("save");
            tree_bytes(&dir)
        })
        .collect();
    (
        !runs[0].is_empty() && runs[0] == runs[1] && !bundles[0].is_empty() && bundles[0] == bundles[1],
        format!("{} run files and {} bundle files byte-identical", runs[0].len(), bundles[0].len()),
    )
}

// ---------------------------------------------------------------- protocol

fn protocol() -> Verdict {
    let defaults = TrainConfig::default();
    let (ds, cfg) = small_pretrain(1, 22, defaults.rankme_skip_epochs);
    let run = train(&ds, &cfg, None).expect("training");
    let first_rankme = run.rankme_history.first().map(|h| h.0);
    let early_log = run.log.iter().any(|r| r.epoch <= 20 && r.rankme.is_some());
    let rankme_ok = defaults.rankme_skip_epochs == 20
        && first_rankme == Some(21)
        && !early_log
        && run.best.as_ref().is_some_and(|b| b.0 > 20);

    let obj_patches = PretrainConfig::default().objective().patches_per_bag;
    let mut rng = Rng::new(11);
    let sizes_ok = [100, 2048, 5000].iter().all(|&n| {
        let bag = PatchEmbeddingBag::new(StainId::new("HE", 0), random(n, 3, &mut rng)).expect("bag");
        sample_patches(&bag, obj_patches, &mut rng).expect("sample").rows() == 2048
    });

    // class means and Euclidean nearest-mean decisions
    let train_x = random(12, 4, &mut rng);
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let queries = random(20, 4, &mut rng);
    let p = prototype_classify(&train_x, &labels, &queries).expect("prototypes");
    let mut proto_ok = true;
    for k in 0..3 {
        let members: Vec<usize> = (0..12).filter(|&i| labels[i] == k).collect();
        for j in 0..4 {
            let m = members.iter().map(|&i| train_x[(i, j)]).sum::<f64>() / members.len() as f64;
            proto_ok &= (p.centers[(k, j)] - m).abs() < 1e-12;
        }
    }
    for q in 0..20 {
        let dist = |k: usize| (0..4).map(|j| (queries[(q, j)] - p.centers[(k, j)]).powi(2)).sum::<f64>().sqrt();
        let nearest = (0..3).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("classes");
        proto_ok &= p.predictions[q] == nearest;
        proto_ok &= (0..3).all(|k| (p.scores[(q, k)] + dist(k)).abs() < 1e-12);
    }
    (
        rankme_ok && obj_patches == 2048 && sizes_ok && proto_ok,
        format!(
            "first rankme epoch {first_rankme:?}, patches per bag {obj_patches} (sizes ok {sizes_ok}), prototypes ok {proto_ok}"
        ),
    )
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut lines: Vec<(&str, &str, Verdict)> = Vec::new();
    let mut record = |id, name, v: Verdict| {
        println!("{} {id} {name}: {}", if v.0 { "PASS" } else { "FAIL" }, v.1);
        lines.push((id, name, v));
    };
    record("AC1", "gradient correctness", guarded(gradients));
    record("AC2", "entropic OT vs exact LP", guarded(transport));
    record("AC3", "Gromov-Wasserstein sanity", guarded(gromov));
    record("AC4", "infoNCE anchors", guarded(info_nce_anchors));
    record("AC5", "RankMe", guarded(rankme_checks));
    record("AC6", "learning-rate schedule", guarded(schedule));
    match panic::catch_unwind(end_to_end) {
        Ok(e) => {
            record("AC7", "alignment gain", alignment_gain(&e));
            record("AC8", "ablation ordering", ablation(&e));
        }
        Err(_) => {
            record("AC7", "alignment gain", (false, "end-to-end run panicked".into()));
            record("AC8", "ablation ordering", (false, "end-to-end run panicked".into()));
        }
    }
    record("AC9", "metric oracles", guarded(metric_oracles));
    record("AC10", "determinism", guarded(determinism));
    record("AC11", "protocol fidelity", guarded(protocol));
    let failed = lines.iter().filter(|l| !l.2 .0).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
