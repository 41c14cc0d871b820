use std::collections::{BTreeMap, BTreeSet};

use anyhow::Result;
use log::info;
use racnet_core::eval::detection_metrics_from_verdicts;
use racnet_core::inference::{decide, flops_of, InferencePolicy, PathCosts};
use racnet_core::nn::Network;
use racnet_core::rac::{collect_taps, train_rac_from_taps, BlcConfig, Rac, RacOutput};
use serde::{Deserialize, Serialize};

use super::{predictions, relevance, write_summary, Context, Splits};
use crate::artifacts::{opt_pct, write_json, write_jsonl, Provenance, Table};

pub const SELECTION_FILE: &str = "selection.json";

/// One evaluated grid point for one classifier seed, on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub layers: Vec<usize>,
    pub k: usize,
    pub delta_th: f64,
    pub seed: u64,
    pub tnr: Option<f64>,
    pub fnr: Option<f64>,
    pub normalized_flops: f64,
    pub early_exit_pct: f64,
    pub pct_correct: f64,
    pub pct_nd: f64,
    pub pct_bad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub layers: Vec<usize>,
    pub k: usize,
    pub delta_th: f64,
    pub seed: u64,
    pub reason: String,
}

/// Median over seeds of one `(layers, k, delta_th)` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMedian {
    pub layers: Vec<usize>,
    pub k: usize,
    pub delta_th: f64,
    pub seeds: usize,
    pub tnr: Option<f64>,
    pub fnr: Option<f64>,
    pub normalized_flops: f64,
    pub early_exit_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub layers: Vec<usize>,
    pub k: usize,
    pub delta_th: f64,
    pub tnr: Option<f64>,
    pub fnr: Option<f64>,
    pub normalized_flops: f64,
    pub early_exit_pct: f64,
    /// Whether the point satisfies every selection target.
    pub meets_targets: bool,
    /// Number of grid points satisfying the targets.
    pub candidates: usize,
}

/// Values of one axis with the other two held at the selected point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub axis: String,
    pub x: Vec<String>,
    pub tnr: Vec<Option<f64>>,
    pub fnr: Vec<Option<f64>>,
    pub normalized_flops: Vec<f64>,
    pub early_exit_pct: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    /// Holds along the series through the selected point.
    pub holds_at_selection: bool,
    /// Slices (fixed values of the other axes) on which the trend holds.
    pub slices_holding: usize,
    pub slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub provenance: Provenance,
    pub grid_points: usize,
    pub evaluated: usize,
    pub skipped: Vec<SkippedPoint>,
    pub medians: Vec<GridMedian>,
    pub selection: Selection,
    pub series: Vec<Series>,
    pub trends: Vec<TrendCheck>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// `true` when every step is `<=` the previous one.
pub fn nonincreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

pub fn run(ctx: &Context, net: &Network, model_hash: &str, splits: &Splits) -> Result<SweepSummary> {
    let s = &ctx.cfg.sweep;
    let layers: Vec<usize> = s.layer_pairs.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut pairs = s.layer_pairs.clone();
    pairs.sort();
    pairs.dedup();
    let mut ks = s.k.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut deltas = s.delta_th.clone();
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();

    for pair in &pairs {
        InferencePolicy::new(pair.clone(), 0.5)?.validate(Some(net.depth()))?;
    }
    let files = relevance::matrices(ctx, net, model_hash, &splits.train, &layers)?;
    info!("collecting taps at layers {layers:?}");
    let (train_taps, _) = collect_taps(net, &splits.train, &layers)?;
    let (val_taps, val_logits) = collect_taps(net, &splits.validation, &layers)?;
    let val_pred = predictions(&val_logits);
    let truths = splits.validation.labels();

    type CellKey = (usize, usize, u64);
    let mut cells: BTreeMap<CellKey, (Rac, Vec<RacOutput>)> = BTreeMap::new();
    let mut infeasible: BTreeMap<CellKey, String> = BTreeMap::new();
    for &seed in &s.seeds {
        for (li, &layer) in layers.iter().enumerate() {
            let r = train_taps[li].shape[0];
            for &k in &ks {
                if k > r {
                    infeasible.insert(
                        (layer, k, seed),
                        format!("k = {k} exceeds the {r} feature maps at layer {layer}"),
                    );
                    continue;
                }
                info!("seed {seed}: training cell at layer {layer} with k = {k}");
                let blc = BlcConfig {
                    seed,
                    ..ctx.cfg.rac.blc.clone()
                };
                let (rac, _) = train_rac_from_taps(&train_taps[li], splits.train.labels(), &files[li].stored.matrix, k, &blc)?;
                let outputs = (0..val_taps[li].len())
                    .map(|i| Ok(RacOutput::from_probs(rac.probabilities(val_taps[li].row(i))?)))
                    .collect::<racnet_core::Result<Vec<_>>>()?;
                cells.insert((layer, k, seed), (rac, outputs));
            }
        }
    }

    let baseline_flops = flops_of(net, net.depth(), None)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut grid_points = 0;
    for pair in &pairs {
        for &k in &ks {
            for &delta_th in &deltas {
                for &seed in &s.seeds {
                    grid_points += 1;
                    let missing = pair.iter().find_map(|&l| infeasible.get(&(l, k, seed)));
                    if let Some(reason) = missing {
                        skipped.push(SkippedPoint {
                            layers: pair.clone(),
                            k,
                            delta_th,
                            seed,
                            reason: reason.clone(),
                        });
                        continue;
                    }
                    let racs: Vec<Rac> = pair.iter().map(|&l| cells[&(l, k, seed)].0.clone()).collect();
                    let policy = InferencePolicy::new(pair.clone(), delta_th)?;
                    let costs = PathCosts::new(net, &racs, &policy)?;
                    let mut verdicts = Vec::with_capacity(truths.len());
                    let mut total_flops = 0u64;
                    for i in 0..truths.len() {
                        let outputs: Vec<RacOutput> = pair.iter().map(|&l| cells[&(l, k, seed)].1[i].clone()).collect();
                        let o = decide(&outputs, &policy, &costs, || Ok(val_pred[i]))?;
                        total_flops += o.flops;
                        verdicts.push((o.verdict, o.early));
                    }
                    let d = detection_metrics_from_verdicts(&val_pred, truths, &verdicts)?;
                    let avg = total_flops as f64 / truths.len() as f64;
                    records.push(SweepRecord {
                        layers: pair.clone(),
                        k,
                        delta_th,
                        seed,
                        tnr: d.tnr,
                        fnr: d.fnr,
                        normalized_flops: baseline_flops as f64 / avg,
                        early_exit_pct: d.early_exit_pct,
                        pct_correct: d.pct_correct,
                        pct_nd: d.pct_nd,
                        pct_bad: d.pct_bad,
                    });
                }
            }
        }
    }

    let medians = grid_medians(&records);
    let selection = select(&medians, s.target_fnr, s.min_normalized_flops, s.min_early_exit_pct)?;
    let series = series_through(&medians, &selection, &pairs, &ks, &deltas);
    let trends = trend_checks(&medians, &selection, &pairs, &ks, &deltas);
    let summary = SweepSummary {
        provenance: Provenance {
            config_hash: ctx.cfg.hash(),
            training_key: ctx.cfg.training_key(),
            dataset_hash: splits.hash(),
            model_hash: Some(model_hash.to_string()),
            racs_hash: None,
        },
        grid_points,
        evaluated: records.len(),
        skipped,
        medians,
        selection,
        series,
        trends,
    };

    let dir = ctx.run.stage("sweep");
    write_jsonl(&dir.join("records.jsonl"), &records)?;
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(&dir.join(SELECTION_FILE), &summary.selection)?;
    write_summary(&dir.join("summary.txt"), &render(&summary))?;
    Ok(summary)
}

pub fn grid_medians(records: &[SweepRecord]) -> Vec<GridMedian> {
    let mut groups: Vec<(Vec<usize>, usize, f64, Vec<&SweepRecord>)> = Vec::new();
    for r in records {
        match groups
            .iter_mut()
            .find(|g| g.0 == r.layers && g.1 == r.k && g.2 == r.delta_th)
        {
            Some(g) => g.3.push(r),
            None => groups.push((r.layers.clone(), r.k, r.delta_th, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(layers, k, delta_th, rs)| {
            let mut tnr: Vec<f64> = rs.iter().filter_map(|r| r.tnr).collect();
            let mut fnr: Vec<f64> = rs.iter().filter_map(|r| r.fnr).collect();
            let mut nf: Vec<f64> = rs.iter().map(|r| r.normalized_flops).collect();
            let mut ee: Vec<f64> = rs.iter().map(|r| r.early_exit_pct).collect();
            GridMedian {
                layers,
                k,
                delta_th,
                seeds: rs.len(),
                tnr: median(&mut tnr),
                fnr: median(&mut fnr),
                normalized_flops: median(&mut nf).expect("group is non-empty"),
                early_exit_pct: median(&mut ee).expect("group is non-empty"),
            }
        })
        .collect()
}

/// Highest median TNR among points meeting the FNR, FLOPs and early-exit
/// targets. Without such a point, the lowest-FNR point is returned and
/// flagged.
pub fn select(medians: &[GridMedian], target_fnr: f64, min_flops: f64, min_early: f64) -> Result<Selection> {
    let ok = |m: &GridMedian| {
        m.fnr.is_some_and(|f| f <= target_fnr) && m.normalized_flops >= min_flops && m.early_exit_pct >= min_early
    };
    let candidates = medians.iter().filter(|m| ok(m)).count();
    let key = |m: &GridMedian| (m.tnr.unwrap_or(0.0), -m.fnr.unwrap_or(100.0), m.normalized_flops);
    let better = |a: &GridMedian, b: &GridMedian| key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater);
    let mut best: Option<&GridMedian> = None;
    for m in medians.iter().filter(|m| ok(m)) {
        if best.is_none_or(|b| better(m, b)) {
            best = Some(m);
        }
    }
    if best.is_none() {
        for m in medians {
            let f = m.fnr.unwrap_or(100.0);
            if best.is_none_or(|b| f < b.fnr.unwrap_or(100.0)) {
                best = Some(m);
            }
        }
    }
    let m = best.ok_or_else(|| anyhow::anyhow!("sweep: every grid point was skipped"))?;
    Ok(Selection {
        layers: m.layers.clone(),
        k: m.k,
        delta_th: m.delta_th,
        tnr: m.tnr,
        fnr: m.fnr,
        normalized_flops: m.normalized_flops,
        early_exit_pct: m.early_exit_pct,
        meets_targets: candidates > 0,
        candidates,
    })
}

fn find<'a>(medians: &'a [GridMedian], layers: &[usize], k: usize, delta: f64) -> Option<&'a GridMedian> {
    medians.iter().find(|m| m.layers == layers && m.k == k && m.delta_th == delta)
}

fn series_of(axis: &str, points: Vec<(String, &GridMedian)>) -> Series {
    Series {
        axis: axis.to_string(),
        x: points.iter().map(|p| p.0.clone()).collect(),
        tnr: points.iter().map(|p| p.1.tnr).collect(),
        fnr: points.iter().map(|p| p.1.fnr).collect(),
        normalized_flops: points.iter().map(|p| p.1.normalized_flops).collect(),
        early_exit_pct: points.iter().map(|p| p.1.early_exit_pct).collect(),
    }
}

fn series_through(
    medians: &[GridMedian],
    sel: &Selection,
    pairs: &[Vec<usize>],
    ks: &[usize],
    deltas: &[f64],
) -> Vec<Series> {
    let by_layers = pairs
        .iter()
        .filter_map(|p| find(medians, p, sel.k, sel.delta_th).map(|m| (format!("{p:?}"), m)))
        .collect();
    let by_k = ks
        .iter()
        .filter_map(|&k| find(medians, &sel.layers, k, sel.delta_th).map(|m| (k.to_string(), m)))
        .collect();
    let by_delta = deltas
        .iter()
        .filter_map(|&d| find(medians, &sel.layers, sel.k, d).map(|m| (d.to_string(), m)))
        .collect();
    vec![
        series_of("layers", by_layers),
        series_of("k", by_k),
        series_of("delta_th", by_delta),
    ]
}

fn values<F: Fn(&GridMedian) -> Option<f64>>(points: &[&GridMedian], f: F) -> Option<Vec<f64>> {
    points.iter().map(|m| f(m)).collect()
}

/// The three sweep trends, evaluated on grid medians with ties allowed:
/// deeper pairs lower both TNR and FNR, larger k does not raise FNR, and a
/// higher threshold does not raise normalized FLOPs.
fn trend_checks(medians: &[GridMedian], sel: &Selection, pairs: &[Vec<usize>], ks: &[usize], deltas: &[f64]) -> Vec<TrendCheck> {
    let layers_trend = |pts: &[&GridMedian]| {
        pts.len() >= 3
            && values(pts, |m| m.tnr).is_some_and(|v| nonincreasing(&v))
            && values(pts, |m| m.fnr).is_some_and(|v| nonincreasing(&v))
    };
    let k_trend = |pts: &[&GridMedian]| pts.len() >= 2 && values(pts, |m| m.fnr).is_some_and(|v| nonincreasing(&v));
    let delta_trend =
        |pts: &[&GridMedian]| pts.len() >= 2 && nonincreasing(&pts.iter().map(|m| m.normalized_flops).collect::<Vec<_>>());

    let mut out = Vec::new();
    let mut slices = (0, 0);
    for &k in ks {
        for &d in deltas {
            let pts: Vec<&GridMedian> = pairs.iter().filter_map(|p| find(medians, p, k, d)).collect();
            slices.1 += 1;
            slices.0 += usize::from(layers_trend(&pts));
        }
    }
    let at: Vec<&GridMedian> = pairs.iter().filter_map(|p| find(medians, p, sel.k, sel.delta_th)).collect();
    out.push(TrendCheck {
        name: "deeper layer pair lowers TNR and FNR".into(),
        holds_at_selection: layers_trend(&at),
        slices_holding: slices.0,
        slices: slices.1,
    });

    let mut slices = (0, 0);
    for p in pairs {
        for &d in deltas {
            let pts: Vec<&GridMedian> = ks.iter().filter_map(|&k| find(medians, p, k, d)).collect();
            slices.1 += 1;
            slices.0 += usize::from(k_trend(&pts));
        }
    }
    let at: Vec<&GridMedian> = ks.iter().filter_map(|&k| find(medians, &sel.layers, k, sel.delta_th)).collect();
    out.push(TrendCheck {
        name: "larger k does not raise FNR".into(),
        holds_at_selection: k_trend(&at),
        slices_holding: slices.0,
        slices: slices.1,
    });

    let mut slices = (0, 0);
    for p in pairs {
        for &k in ks {
            let pts: Vec<&GridMedian> = deltas.iter().filter_map(|&d| find(medians, p, k, d)).collect();
            slices.1 += 1;
            slices.0 += usize::from(delta_trend(&pts));
        }
    }
    let at: Vec<&GridMedian> = deltas.iter().filter_map(|&d| find(medians, &sel.layers, sel.k, d)).collect();
    out.push(TrendCheck {
        name: "higher delta_th does not raise normalized FLOPs".into(),
        holds_at_selection: delta_trend(&at),
        slices_holding: slices.0,
        slices: slices.1,
    });
    out
}

pub fn render(s: &SweepSummary) -> String {
    let mut out = format!(
        "validation sweep: {} grid points, {} evaluated, {} skipped\n\n",
        s.grid_points,
        s.evaluated,
        s.skipped.len()
    );
    let mut t = Table::new(&["layers", "k", "delta_th", "seeds", "TNR %", "FNR %", "norm. FLOPs", "early %"]);
    for m in &s.medians {
        t.row(&[
            format!("{:?}", m.layers),
            m.k.to_string(),
            m.delta_th.to_string(),
            m.seeds.to_string(),
            opt_pct(m.tnr),
            opt_pct(m.fnr),
            format!("{:.3}", m.normalized_flops),
            format!("{:.2}", m.early_exit_pct),
        ]);
    }
    out.push_str(&t.render());
    for sk in &s.skipped {
        out.push_str(&format!(
            "skipped {:?} k={} delta_th={} seed={}: {}\n",
            sk.layers, sk.k, sk.delta_th, sk.seed, sk.reason
        ));
    }
    let sel = &s.selection;
    out.push_str(&format!(
        "\nselected layers {:?}, k = {}, delta_th = {}: TNR {} %, FNR {} %, normalized FLOPs {:.3}, early exit {:.2} % ({})\n\n",
        sel.layers,
        sel.k,
        sel.delta_th,
        opt_pct(sel.tnr),
        opt_pct(sel.fnr),
        sel.normalized_flops,
        sel.early_exit_pct,
        if sel.meets_targets {
            format!("{} points met the targets", sel.candidates)
        } else {
            "no point met the targets; lowest FNR chosen".to_string()
        }
    ));
    let mut t = Table::new(&["trend", "at selection", "slices holding"]);
    for tr in &s.trends {
        t.row(&[
            tr.name.clone(),
            tr.holds_at_selection.to_string(),
            format!("{}/{}", tr.slices_holding, tr.slices),
        ]);
    }
    out.push_str(&t.render());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(layers: Vec<usize>, k: usize, d: f64, tnr: f64, fnr: f64, nf: f64, ee: f64) -> GridMedian {
        GridMedian {
            layers,
            k,
            delta_th: d,
            seeds: 3,
            tnr: Some(tnr),
            fnr: Some(fnr),
            normalized_flops: nf,
            early_exit_pct: ee,
        }
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn nonincreasing_allows_ties() {
        assert!(nonincreasing(&[3.0, 3.0, 1.0]));
        assert!(!nonincreasing(&[1.0, 2.0]));
        assert!(nonincreasing(&[]));
    }

    #[test]
    fn selection_prefers_tnr_within_targets() {
        let m = vec![
            point(vec![5, 6], 8, 0.5, 60.0, 20.0, 1.5, 90.0),
            point(vec![5, 6], 16, 0.5, 40.0, 9.0, 1.2, 70.0),
            point(vec![5, 6], 32, 0.5, 35.0, 5.0, 1.3, 80.0),
            point(vec![6, 7], 8, 0.5, 50.0, 8.0, 1.01, 80.0),
        ];
        let s = select(&m, 10.0, 1.05, 50.0).unwrap();
        assert_eq!((s.k, s.meets_targets, s.candidates), (16, true, 2));
    }

    #[test]
    fn selection_falls_back_to_lowest_fnr() {
        let m = vec![
            point(vec![5, 6], 8, 0.5, 60.0, 20.0, 1.5, 90.0),
            point(vec![5, 6], 16, 0.5, 40.0, 12.0, 1.2, 70.0),
        ];
        let s = select(&m, 10.0, 1.05, 50.0).unwrap();
        assert_eq!((s.k, s.meets_targets, s.candidates), (16, false, 0));
    }

    #[test]
    fn medians_group_over_seeds() {
        let rec = |seed, tnr| SweepRecord {
            layers: vec![5, 6],
            k: 8,
            delta_th: 0.5,
            seed,
            tnr: Some(tnr),
            fnr: Some(1.0),
            normalized_flops: 1.0,
            early_exit_pct: 50.0,
            pct_correct: 0.0,
            pct_nd: 0.0,
            pct_bad: 0.0,
        };
        let m = grid_medians(&[rec(0, 10.0), rec(1, 30.0), rec(2, 20.0)]);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].seeds, m[0].tnr), (3, Some(20.0)));
    }
}
