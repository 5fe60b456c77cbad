//! Desk-scale measurements: how much masked shape a decoder could recover
//! from other masked points (leakage), and how linearly separable encoder
//! features are (linear probe).

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{MspConfig, ProbeConfig};
use crate::error::{MspError, Result};
use crate::masking::{apply_mask, MaskResult, MaskSpec};
use crate::neural::{AdamWConfig, AdamWState, ParamStore};
use crate::pipeline::encode_points;
use crate::rng::{derive_seed, fisher_yates_prefix, stream, tag};
use crate::scene::{Point, PointCloud};
use crate::shape_context::{compute_multiscale_sc, ScPartition};
use crate::tensor::{Tape, Tensor};

pub const LEAKAGE_HEADER: &str = "keep_fraction,mean_recall,n_centers,n_seeds";
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LeakageRow {
    pub keep_fraction: f64,
    pub mean_recall: f64,
    /// Centers with at least one occupied ground-truth bin.
    pub n_centers: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LeakageReport {
    pub rows: Vec<LeakageRow>,
}

impl LeakageReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LEAKAGE_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.keep_fraction, r.mean_recall, r.n_centers, r.seeds.len()).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LEAKAGE_HEADER) {
            return Err(MspError::Config("not a leakage report".into()));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || MspError::Config(format!("malformed leakage row '{l}'"));
                let [kf, mr, nc, ns] = f[..] else { return Err(bad()) };
                let n_seeds: u64 = ns.parse().map_err(|_| bad())?;
                Ok(LeakageRow {
                    keep_fraction: kf.parse().map_err(|_| bad())?,
                    mean_recall: mr.parse().map_err(|_| bad())?,
                    n_centers: nc.parse().map_err(|_| bad())?,
                    seeds: (0..n_seeds).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(LeakageReport { rows })
    }

    /// Pool several reports with identical keep fractions, weighting each
    /// row by its center count times seed count.
    pub fn pooled(reports: &[LeakageReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| MspError::DegenerateProbe("no reports to pool".into()))?;
        let mut rows = Vec::new();
        for (i, r0) in first.rows.iter().enumerate() {
            let (mut num, mut den, mut centers) = (0.0, 0.0, 0);
            for rep in reports {
                let r = rep
                    .rows
                    .get(i)
                    .filter(|r| r.keep_fraction == r0.keep_fraction)
                    .ok_or_else(|| MspError::Contract("leakage reports use different keep fractions".into()))?;
                let w = (r.n_centers * r.seeds.len()) as f64;
                num += r.mean_recall * w;
                den += w;
                centers += r.n_centers;
            }
            rows.push(LeakageRow {
                keep_fraction: r0.keep_fraction,
                mean_recall: num / den,
                n_centers: centers,
                seeds: r0.seeds.clone(),
            });
        }
        Ok(LeakageReport { rows })
    }
}

/// Recall of `truth`'s occupied bins in `guess`; `None` if `truth` is empty.
pub fn bit_recall(truth: &[u8], guess: &[u8]) -> Option<f64> {
    let occupied = truth.iter().filter(|&&b| b == 1).count();
    if occupied == 0 {
        return None;
    }
    let hit = truth.iter().zip(guess).filter(|(&t, &g)| t == 1 && g == 1).count();
    Some(hit as f64 / occupied as f64)
}

/// For every masked center: the ground-truth descriptor over the whole
/// cloud versus the descriptor an adversary would build from only those
/// masked points that survive uniform subsampling to `f * |masked|` points.
pub fn leakage_probe(
    cloud: &PointCloud,
    mask: &MaskResult,
    parts: &[ScPartition],
    keep_fractions: &[f64],
    seeds: &[u64],
) -> Result<LeakageReport> {
    if mask.masked_idx.is_empty() {
        return Err(MspError::DegenerateProbe("mask hides no points".into()));
    }
    if seeds.is_empty() {
        return Err(MspError::Contract("leakage probe needs at least one seed".into()));
    }
    if let Some(f) = keep_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(MspError::Contract(format!("keep fraction {f} outside (0,1]")));
    }
    let pos = cloud.positions();
    let centers: Vec<Point> = mask.masked_idx.iter().map(|&i| pos[i]).collect();
    let masked_pos: Vec<Point> = centers.clone();
    let truth = compute_multiscale_sc(&centers, pos, parts)?;
    let scored: Vec<usize> = (0..centers.len()).filter(|&c| truth.row(c).contains(&1)).collect();
    if scored.is_empty() {
        return Err(MspError::DegenerateProbe("no masked center has an occupied bin".into()));
    }
    let n_m = masked_pos.len();
    let rows = keep_fractions
        .iter()
        .map(|&f| {
            let keep = (f * n_m as f64).round() as usize;
            let per_seed: Vec<f64> = seeds
                .par_iter()
                .map(|&s| {
                    let mut rng = stream(s, &[tag::LEAKAGE, f.to_bits()]);
                    let survivors: Vec<Point> =
                        fisher_yates_prefix(n_m, keep, &mut rng).into_iter().map(|i| masked_pos[i]).collect();
                    let guess = if survivors.is_empty() {
                        None
                    } else {
                        Some(compute_multiscale_sc(&centers, &survivors, parts)?)
                    };
                    let sum: f64 = scored
                        .iter()
                        .map(|&c| match &guess {
                            Some(g) => bit_recall(truth.row(c), g.row(c)).expect("scored centers are occupied"),
                            None => 0.0,
                        })
                        .sum();
                    Ok(sum / scored.len() as f64)
                })
                .collect::<Result<_>>()?;
            Ok(LeakageRow {
                keep_fraction: f,
                mean_recall: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                n_centers: scored.len(),
                seeds: seeds.to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LeakageReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeArm {
    Pretrained,
    Scratch,
}

impl fmt::Display for ProbeArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeArm::Pretrained => "pretrained",
            ProbeArm::Scratch => "scratch",
        })
    }
}

impl FromStr for ProbeArm {
    type Err = MspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(ProbeArm::Pretrained),
            "scratch" => Ok(ProbeArm::Scratch),
            _ => Err(MspError::Config(format!("unknown probe arm '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub arm: ProbeArm,
    pub overall: f64,
    /// Held-out accuracy per class; `None` where the class is absent.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub train_scenes: Vec<usize>,
    pub test_scenes: Vec<usize>,
}

pub fn probe_csv_header() -> String {
    let classes: Vec<String> = (0..NUM_CLASSES).map(|c| format!("acc_class{c}")).collect();
    format!("arm,overall_acc,{}", classes.join(","))
}

pub fn probe_results_csv(results: &[ProbeResult]) -> String {
    let mut out = probe_csv_header();
    out.push('\n');
    for r in results {
        let cls: Vec<String> = r.per_class.iter().map(|a| a.map_or(String::new(), |v| v.to_string())).collect();
        writeln!(out, "{},{},{}", r.arm, r.overall, cls.join(",")).unwrap();
    }
    out
}

pub fn probe_results_from_csv(text: &str) -> Result<Vec<ProbeResult>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(probe_csv_header().as_str()) {
        return Err(MspError::Config("not a probe report".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || MspError::Config(format!("malformed probe row '{l}'"));
            if f.len() != 2 + NUM_CLASSES {
                return Err(bad());
            }
            let mut per_class = [None; NUM_CLASSES];
            for (slot, v) in per_class.iter_mut().zip(&f[2..]) {
                if !v.is_empty() {
                    *slot = Some(v.parse().map_err(|_| bad())?);
                }
            }
            Ok(ProbeResult {
                arm: f[0].parse()?,
                overall: f[1].parse().map_err(|_| bad())?,
                per_class,
                train_scenes: Vec::new(),
                test_scenes: Vec::new(),
            })
        })
        .collect()
}

/// Scene split: a seeded permutation, the first `train_fraction` share
/// (at least one scene on each side) for training.
pub fn split_scenes(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(MspError::DegenerateProbe("need at least two labeled scenes".into()));
    }
    let order = fisher_yates_prefix(n, n, &mut stream(seed, &[tag::PROBE_SPLIT]));
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Frozen encoder features of every point of `cloud` (nothing masked).
pub fn point_features(cfg: &MspConfig, encoder: &ParamStore, cloud: &PointCloud) -> Result<Tensor> {
    let mut tape = Tape::with_precision(cfg.precision);
    let p = encoder.bind(&mut tape, false);
    let all: Vec<usize> = (0..cloud.len()).collect();
    let f = encode_points(cfg, &mut tape, &p, cloud, &all)?;
    Ok(tape.value(f).clone())
}

/// Trained softmax classifier `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let k = self.bias.numel();
        (0..x.rows())
            .map(|i| {
                let row = x.row(i);
                (0..k)
                    .map(|c| {
                        let s: f64 = row.iter().enumerate().map(|(j, v)| v * self.weight.at(j, c)).sum();
                        s + self.bias.data()[c]
                    })
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best })
                    .0
            })
            .collect()
    }
}

/// Full-batch softmax regression, zero-initialized, AdamW without decay.
pub fn train_linear_classifier(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    steps: usize,
    lr: f64,
) -> Result<LinearClassifier> {
    let (n, c) = (x.rows(), x.cols());
    if labels.len() != n || n == 0 {
        return Err(MspError::shape("linear_probe", x.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MspError::Contract(format!("label {bad} outside {classes} classes")));
    }
    let mut onehot = vec![0.0; n * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let onehot = Tensor::matrix(n, classes, onehot)?;
    let mut store = ParamStore::new();
    store.insert("probe.w", Tensor::zeros(&[c, classes]))?;
    store.insert("probe.b", Tensor::zeros(&[classes]))?;
    let mut opt = AdamWState::new(AdamWConfig { lr, weight_decay: 0.0, ..AdamWConfig::default() }, &store);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let logits = tape.matmul(xv, p.get("probe.w")?)?;
        let logits = tape.add(logits, p.get("probe.b")?)?;
        let logp = tape.log_softmax_lastdim(logits)?;
        let y = tape.constant(onehot.clone());
        let picked = tape.mul(logp, y)?;
        let s = tape.sum(picked);
        let loss = tape.scale(s, -1.0 / n as f64);
        tape.backward(loss)?;
        store.zero_grads();
        store.accumulate_grads(&tape, &p)?;
        opt.step(&mut store)?;
    }
    Ok(LinearClassifier { weight: store.get("probe.w")?.clone(), bias: store.get("probe.b")?.clone() })
}

fn stack(feats: &[Tensor], labels: &[Vec<u8>], which: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let c = feats.first().map_or(0, Tensor::cols);
    let mut data = Vec::new();
    let mut y = Vec::new();
    for &s in which {
        data.extend_from_slice(feats[s].data());
        y.extend(labels[s].iter().map(|&l| l as usize));
    }
    Ok((Tensor::matrix(y.len(), c, data)?, y))
}

/// Train a linear classifier on frozen features of the training scenes and
/// report held-out per-point accuracy.
pub fn linear_probe(
    cfg: &MspConfig,
    encoder: &ParamStore,
    scenes: &[PointCloud],
    split_seed: u64,
    probe: &ProbeConfig,
    arm: ProbeArm,
) -> Result<ProbeResult> {
    let labels: Vec<Vec<u8>> = scenes
        .iter()
        .map(|s| {
            s.labels()
                .map(<[u8]>::to_vec)
                .ok_or_else(|| MspError::DegenerateProbe("probe scenes must carry labels".into()))
        })
        .collect::<Result<_>>()?;
    let (train, test) = split_scenes(scenes.len(), probe.train_fraction, split_seed)?;
    let classes: BTreeSet<u8> = train.iter().flat_map(|&s| labels[s].iter().copied()).collect();
    if classes.len() < 2 {
        return Err(MspError::DegenerateProbe(format!("training scenes {train:?} hold a single class")));
    }
    let feats: Vec<Tensor> = scenes.par_iter().map(|s| point_features(cfg, encoder, s)).collect::<Result<_>>()?;
    let (xtr, ytr) = stack(&feats, &labels, &train)?;
    let (xte, yte) = stack(&feats, &labels, &test)?;
    let pred = train_linear_classifier(&xtr, &ytr, NUM_CLASSES, probe.steps, probe.lr)?.predict(&xte);
    let mut hit = [0usize; NUM_CLASSES];
    let mut seen = [0usize; NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(&yte) {
        if t < NUM_CLASSES {
            seen[t] += 1;
            hit[t] += usize::from(p == t);
        }
    }
    let correct: usize = hit.iter().sum();
    Ok(ProbeResult {
        arm,
        overall: if yte.is_empty() { 0.0 } else { correct as f64 / yte.len() as f64 },
        per_class: std::array::from_fn(|c| (seen[c] > 0).then(|| hit[c] as f64 / seen[c] as f64)),
        train_scenes: train,
        test_scenes: test,
    })
}

/// Both arms over split seeds `0..probe.seeds`, pretrained rows first.
pub fn probe_arms(
    cfg: &MspConfig,
    pretrained: &ParamStore,
    scratch: &ParamStore,
    scenes: &[PointCloud],
    probe: &ProbeConfig,
) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for (arm, encoder) in [(ProbeArm::Pretrained, pretrained), (ProbeArm::Scratch, scratch)] {
        for seed in 0..probe.seeds as u64 {
            out.push(linear_probe(cfg, encoder, scenes, seed, probe, arm)?);
        }
    }
    Ok(out)
}

/// Leakage pooled over several scenes, each masked with the configured
/// ratio and block size under its own derived seed.
pub fn pooled_leakage(
    cfg: &MspConfig,
    scenes: &[PointCloud],
    keep_fractions: &[f64],
    seeds: &[u64],
) -> Result<LeakageReport> {
    let reports = scenes
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let spec = MaskSpec {
                ratio: cfg.mask_ratio,
                block_size: cfg.mask_block,
                seed: derive_seed(cfg.seed, &[tag::MASK, i as u64]),
            };
            leakage_probe(cloud, &apply_mask(cloud, &spec)?, &cfg.sc_partitions, keep_fractions, seeds)
        })
        .collect::<Result<Vec<_>>>()?;
    LeakageReport::pooled(&reports)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Probe(Vec<ProbeResult>),
    Leakage(LeakageReport),
}

impl Report {
    /// Parse either report CSV format, recognized by its header.
    pub fn from_csv(text: &str) -> Result<Self> {
        match text.lines().next().map(str::trim) {
            Some(LEAKAGE_HEADER) => Ok(Report::Leakage(LeakageReport::from_csv(text)?)),
            Some(h) if h == probe_csv_header() => Ok(Report::Probe(probe_results_from_csv(text)?)),
            _ => Err(MspError::Config("unrecognized report header".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareChecks {
    /// Required pretrained-minus-scratch mean accuracy.
    pub probe_margin: f64,
    /// Required recall drop between consecutive (descending) keep fractions.
    pub leakage_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub required: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub table: String,
    pub csv: String,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

fn mean_arm(results: &[ProbeResult], arm: ProbeArm) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter(|r| r.arm == arm).map(|r| r.overall).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Summarize labeled reports side by side. Each metric gets a delta against
/// the same metric in the first report that has it. Directional checks:
/// pretrained beats scratch by the probe margin (over all probe rows), and
/// every leakage report loses at least the leakage margin of recall per
/// step down its keep fractions.
pub fn compare_runs(reports: &[(String, Report)], checks: &CompareChecks) -> Comparison {
    let mut rows: Vec<[String; 5]> = Vec::new();
    let mut baseline: Vec<(String, f64)> = Vec::new();
    let mut push = |label: &str, metric: String, value: f64| {
        let delta = match baseline.iter().find(|(m, _)| *m == metric) {
            Some((_, b)) => value - b,
            None => {
                baseline.push((metric.clone(), value));
                0.0
            }
        };
        let kind = if metric.starts_with("recall") { "leakage" } else { "probe" };
        rows.push([label.to_string(), kind.to_string(), metric, format!("{value:.4}"), format!("{delta:+.4}")]);
    };
    let mut outcomes = Vec::new();
    let mut all_probe: Vec<ProbeResult> = Vec::new();
    for (label, report) in reports {
        match report {
            Report::Probe(results) => {
                for arm in [ProbeArm::Pretrained, ProbeArm::Scratch] {
                    if let Some(m) = mean_arm(results, arm) {
                        push(label, format!("acc_{arm}"), m);
                    }
                }
                all_probe.extend(results.iter().cloned());
            }
            Report::Leakage(rep) => {
                for r in &rep.rows {
                    push(label, format!("recall@{}", r.keep_fraction), r.mean_recall);
                }
                let mut sorted = rep.rows.clone();
                sorted.sort_by(|a, b| b.keep_fraction.total_cmp(&a.keep_fraction));
                for w in sorted.windows(2) {
                    let drop = w[0].mean_recall - w[1].mean_recall;
                    outcomes.push(CheckOutcome {
                        name: format!("{label}: recall {} -> {}", w[0].keep_fraction, w[1].keep_fraction),
                        value: drop,
                        required: checks.leakage_margin,
                        passed: drop >= checks.leakage_margin,
                    });
                }
            }
        }
    }
    if let (Some(pre), Some(scr)) =
        (mean_arm(&all_probe, ProbeArm::Pretrained), mean_arm(&all_probe, ProbeArm::Scratch))
    {
        let gain = pre - scr;
        outcomes.push(CheckOutcome {
            name: "pretrained - scratch accuracy".into(),
            value: gain,
            required: checks.probe_margin,
            passed: gain >= checks.probe_margin,
        });
    }

    let header = ["report", "kind", "metric", "value", "delta"];
    let widths: Vec<usize> =
        (0..5).map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0)).collect();
    let fmt_row = |cells: &[&str]| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut table = fmt_row(&header);
    table.push('\n');
    let mut csv = header.join(",");
    csv.push('\n');
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        table.push_str(&fmt_row(&cells));
        table.push('\n');
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    for o in &outcomes {
        writeln!(
            table,
            "check {}: {:.4} (need >= {:.4}) {}",
            o.name,
            o.value,
            o.required,
            if o.passed { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    let passed = outcomes.iter().all(|o| o.passed);
    Comparison { table, csv, checks: outcomes, passed }
}
