use std::collections::BTreeMap;

use rayon::prelude::*;

use super::LossMode;
use crate::datamodel::{sample_patches, MultistainCase};
use crate::encoder::{encoder_backward, forward, EncoderConfig, EncoderParams, ForwardCache, Mode, Upstream};
use crate::error::{Error, Result};
use crate::losses::{
    build_stain_graph, got_loss, got_loss_with_plans, info_nce_pair, intra_loss, mse_pair, ContrastiveConfig,
    GotConfig, GotTerms, LossReport, NodeFeatures, StainLoss, TransportPlan,
};
use crate::numerics::{Matrix, Rng};

/// Loss settings for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub mode: LossMode,
    pub patches_per_bag: usize,
    pub contrastive: &'a ContrastiveConfig,
    pub got: &'a GotConfig,
}

/// Graph adjacencies and transport plans chosen during one batch evaluation.
///
/// Passing them back into [`batch_objective`] evaluates the GOT terms at
/// those fixed plans and edges, which makes the objective a smooth function
/// of the parameters (the gradients returned are exact for it).
#[derive(Clone, Debug, Default)]
pub struct FrozenTransport {
    cases: Vec<FrozenCase>,
}

#[derive(Clone, Debug, Default)]
struct FrozenCase {
    adjacency: Vec<Vec<bool>>,
    plans: Vec<(TransportPlan, TransportPlan)>,
}

pub struct BatchOutput {
    pub report: LossReport,
    pub grads: EncoderParams,
    pub transport: FrozenTransport,
}

struct CaseWork {
    stains: Vec<(usize, String)>,
    sampled: Vec<Matrix>,
    caches: Vec<ForwardCache>,
    got: Option<GotTerms>,
    frozen: FrozenCase,
    hidden_grads: Vec<Option<Matrix>>,
}

fn run_case(
    case: &MultistainCase,
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    obj: &Objective<'_>,
    n_cases: usize,
    mut rng: Rng,
    frozen: Option<&FrozenCase>,
) -> Result<CaseWork> {
    let bags: Vec<_> = if obj.mode.is_cross_modal() {
        case.bags().collect()
    } else {
        vec![&case.anchor]
    };
    let stains = bags.iter().map(|b| (b.stain.index, b.stain.name.clone())).collect();
    let sampled = bags
        .iter()
        .map(|b| sample_patches(b, obj.patches_per_bag, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut work = CaseWork {
        stains,
        hidden_grads: vec![None; sampled.len()],
        sampled,
        caches: Vec::new(),
        got: None,
        frozen: FrozenCase::default(),
    };
    if !obj.mode.is_cross_modal() {
        return Ok(work);
    }
    for (bag, x) in bags.iter().zip(&work.sampled) {
        work.caches.push(forward(params, enc_cfg, x, bag.stain.index, Mode::Train(&mut rng))?);
    }
    if !obj.mode.uses_got() || bags.len() < 2 {
        return Ok(work);
    }

    let mut graphs = Vec::with_capacity(bags.len());
    for (i, (cache, x)) in work.caches.iter().zip(&work.sampled).enumerate() {
        let features = match obj.got.node_features {
            NodeFeatures::Hidden => cache.hidden(),
            NodeFeatures::Raw => x,
        };
        let mut g = build_stain_graph(features, obj.got, &mut rng)?;
        if let Some(f) = frozen {
            let adj = f.adjacency.get(i).ok_or_else(|| Error::dims("frozen graphs", i + 1, f.adjacency.len()))?;
            if adj.len() != g.adjacency.len() {
                return Err(Error::dims("frozen adjacency", g.adjacency.len(), adj.len()));
            }
            g.adjacency.clone_from(adj);
        }
        graphs.push(g);
    }
    let others: Vec<_> = graphs[1..].iter().collect();
    let terms = match frozen {
        Some(f) => got_loss_with_plans(&graphs[0], &others, &f.plans, obj.got)?,
        None => got_loss(&graphs[0], &others, obj.got)?,
    };
    if obj.got.node_features == NodeFeatures::Hidden {
        let scale = 1.0 / n_cases as f64;
        for (i, g) in graphs.iter().enumerate() {
            let node_grad = if i == 0 { &terms.grad_anchor } else { &terms.grad_stains[i - 1] };
            let hidden = work.caches[i].hidden();
            let mut full = Matrix::zeros(hidden.rows(), hidden.cols());
            for (r, &row) in g.indices.iter().enumerate() {
                for (d, s) in full.row_mut(row).iter_mut().zip(node_grad.row(r)) {
                    *d += scale * s;
                }
            }
            work.hidden_grads[i] = Some(full);
        }
    }
    work.frozen = FrozenCase {
        adjacency: graphs.into_iter().map(|g| g.adjacency).collect(),
        plans: terms.plans.clone(),
    };
    work.got = Some(terms);
    Ok(work)
}

/// Anchor-vs-stain pair loss per stain over the sub-batch of cases that have
/// that stain, averaged over the stains present. Accumulates output
/// gradients into `out_grads[case][bag]`.
fn pairwise_term(
    works: &[CaseWork],
    out_grads: &mut [Vec<Vec<f64>>],
    per_stain: &mut BTreeMap<usize, StainLoss>,
    pair: impl Fn(&Matrix, &Matrix) -> Result<(f64, Matrix, Matrix)>,
    record: impl Fn(&mut StainLoss, f64),
) -> Result<f64> {
    let mut members: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (c, w) in works.iter().enumerate() {
        for (b, (stain, _)) in w.stains.iter().enumerate().skip(1) {
            members.entry(*stain).or_default().push((c, b));
        }
    }
    let k = members.len() as f64;
    let mut total = 0.0;
    for (stain, rows) in &members {
        let anchors: Vec<&[f64]> = rows.iter().map(|&(c, _)| works[c].caches[0].output()).collect();
        let others: Vec<&[f64]> = rows.iter().map(|&(c, b)| works[c].caches[b].output()).collect();
        let (loss, ga, gb) = pair(&Matrix::from_rows(&anchors)?, &Matrix::from_rows(&others)?)?;
        total += loss / k;
        record(per_stain.get_mut(stain).expect("stain entry"), loss);
        for (r, &(c, b)) in rows.iter().enumerate() {
            for (d, s) in out_grads[c][0].iter_mut().zip(ga.row(r)) {
                *d += s / k;
            }
            for (d, s) in out_grads[c][b].iter_mut().zip(gb.row(r)) {
                *d += s / k;
            }
        }
    }
    Ok(total)
}

/// Composite loss of one batch of cases and its gradient.
///
/// Every case draws `patches_per_bag` patches per bag and its dropout masks
/// and graph nodes from its own stream forked off `rng`, so results do not
/// depend on thread scheduling. Pair losses average over the stains present
/// in the batch, each over the sub-batch of cases holding that stain. GOT is
/// summed over a case's stains and averaged over cases.
///
/// With `frozen` set (from an earlier call on the same batch and stream) the
/// GOT terms reuse the recorded edges and plans instead of solving.
pub fn batch_objective(
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    cases: &[&MultistainCase],
    obj: &Objective<'_>,
    rng: &mut Rng,
    frozen: Option<&FrozenTransport>,
) -> Result<BatchOutput> {
    if cases.is_empty() {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    if let Some(f) = frozen {
        if obj.mode.uses_got() && f.cases.len() != cases.len() {
            return Err(Error::dims("frozen transport", cases.len(), f.cases.len()));
        }
    }
    let n = cases.len();
    let streams: Vec<Rng> = cases.iter().map(|_| rng.fork()).collect();
    let mut intra_rng = rng.fork();
    let works = cases
        .par_iter()
        .zip(streams)
        .enumerate()
        .map(|(i, (case, r))| {
            let fc = frozen.and_then(|f| f.cases.get(i));
            run_case(case, params, enc_cfg, obj, n, r, fc)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = LossReport::default();
    let mut per_stain: BTreeMap<usize, StainLoss> = BTreeMap::new();
    for w in &works {
        for (idx, name) in w.stains.iter().skip(1) {
            per_stain.entry(*idx).or_insert_with(|| StainLoss { stain: name.clone(), ..Default::default() });
        }
    }
    let mut out_grads: Vec<Vec<Vec<f64>>> =
        works.iter().map(|w| vec![vec![0.0; enc_cfg.d_out]; w.caches.len()]).collect();

    if obj.mode.uses_info_nce() {
        report.info_nce = pairwise_term(
            &works,
            &mut out_grads,
            &mut per_stain,
            |a, b| info_nce_pair(a, b, obj.contrastive).map(|g| (g.loss, g.grad_a, g.grad_b)),
            |s, l| s.info_nce = l,
        )?;
    }
    if obj.mode.uses_mse() {
        report.mse = pairwise_term(
            &works,
            &mut out_grads,
            &mut per_stain,
            |a, b| mse_pair(a, b).map(|g| (g.loss, g.grad_a, g.grad_b)),
            |s, l| s.mse = l,
        )?;
    }
    let mut got = 0.0;
    if obj.mode.uses_got() {
        for w in &works {
            let Some(t) = &w.got else { continue };
            report.got_node += t.node / n as f64;
            report.got_edge += t.edge / n as f64;
            got += t.loss / n as f64;
            for ((stain, _), (node, edge)) in w.stains.iter().skip(1).zip(&t.per_stain) {
                let s = per_stain.get_mut(stain).expect("stain entry");
                s.got_node += node / n as f64;
                s.got_edge += edge / n as f64;
            }
        }
        // gradients already scaled into `hidden_grads`; with raw node
        // features the objective does not depend on the parameters
    }

    let mut caches = Vec::new();
    let mut upstream = Vec::new();
    for (w, og) in works.iter().zip(&out_grads) {
        for (b, cache) in w.caches.iter().enumerate() {
            caches.push(cache);
            upstream.push(Upstream { output: &og[b], hidden: w.hidden_grads[b].as_ref() });
        }
    }
    let mut grads = if caches.is_empty() {
        params.zeros_like()
    } else {
        encoder_backward(params, enc_cfg, &caches, &upstream)?
    };

    if obj.mode.uses_intra() {
        let bags: Vec<(&Matrix, usize)> = works.iter().map(|w| (&w.sampled[0], 0)).collect();
        let (loss, g) = intra_loss(&bags, params, enc_cfg, obj.contrastive, &mut intra_rng)?;
        report.intra = loss;
        grads.add_scaled(1.0, &g)?;
    }

    report.total = report.info_nce + report.mse + got + report.intra;
    report.per_stain = per_stain.into_values().collect();
    let transport = FrozenTransport { cases: works.into_iter().map(|w| w.frozen).collect() };
    Ok(BatchOutput { report, grads, transport })
}
