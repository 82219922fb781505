//! Acceptance gate. One sequential test so wall-clock budgets are not
//! distorted by other tests sharing the CPU. Each criterion prints a
//! single PASS/FAIL line straight to stdout (bypassing capture).

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use terralabel::clustering::{adjusted_rand_index, fcm_fit, FcmParams, Spectra};
use terralabel::evaluation::{context_pairs, evaluate, render_table, EvalChip, MetricReport, Protocol};
use terralabel::features::loss::{bce, dice_coefficients};
use terralabel::features::{combo_loss, TrainConfig};
use terralabel::graphs::{
    build_graph, knn_edges, soft_cross_entropy, GatLayer, GcnLayer, GnnConfig, GnnModel, LayerChoice, SegmentGraph,
    Topology, Variant,
};
use terralabel::ingest::{chip_grid, chip_tile, split_assignments, Split};
use terralabel::matching::{chip_similarity, euclidean_cost, hungarian};
use terralabel::numerics::gradcheck;
use terralabel::numerics::{Bound, ParamStore, Tape, Tensor};
use terralabel::pipeline::{
    project_chips, sweep, synthetic_tile, FeatureStage, PipelineConfig, SweepAxis, SyntheticConfig,
};
use terralabel::projection::{neighbour_purity, project_distances, trustworthiness, Level, UmapParams};
use terralabel::superpixels::{segment_means, slic, SlicParams};

type Outcome = terralabel::Result<(bool, String)>;

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(name: &str, budget_secs: f64, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok((ok, detail)) => (ok && secs < budget_secs, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let tag = if ok { "PASS" } else { "FAIL" };
    let budget = if budget_secs.is_finite() { format!(" / {budget_secs:.0}s") } else { String::new() };
    emit(&format!("{tag} {name} ({secs:.1}s{budget}) {detail}"));
    ok
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

fn weighted_sum(tape: &mut Tape<f64>, y: terralabel::numerics::Var, seed: u64) -> terralabel::Result<terralabel::numerics::Var> {
    let w = tape.constant(random(tape.shape(y), seed));
    let yw = tape.mul(y, w)?;
    Ok(tape.sum_all(yw))
}

fn topology(n: usize, edges: &[(usize, usize)]) -> terralabel::Result<Topology<f64>> {
    let mut e = edges.to_vec();
    e.extend((0..n).map(|i| (i, i)));
    e.sort_unstable();
    e.dedup();
    Topology::new(n, &e)
}

fn gradient_suite() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let step = 1e-5;

    let c = gradcheck::check(&[random(&[2, 3, 6, 5], 1), random(&[4, 3, 3, 3], 2)], step, |t, v| {
        let y = t.conv2d(v[0], v[1], 1)?;
        weighted_sum(t, y, 3)
    })?;
    worst.push(("conv", c.max_relative_error()));

    // Distinct values spaced well beyond the step keep the argmax stable.
    let mut order: Vec<usize> = (0..2 * 3 * 8 * 8).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let pool_in = Tensor::new([2, 3, 8, 8], order.iter().map(|&i| i as f64 * 0.01).collect())?;
    let c = gradcheck::check(&[pool_in], step, |t, v| {
        let y = t.max_pool2(v[0])?;
        weighted_sum(t, y, 5)
    })?;
    worst.push(("pooling", c.max_relative_error()));

    let edges = [(0, 1), (0, 2), (1, 3), (2, 0), (3, 2), (3, 1), (4, 0), (4, 3)];
    let n = 5;
    let topo = topology(n, &edges)?;
    let mut store = ParamStore::<f64>::new();
    let gat = GatLayer::new(&mut store, "g", 3, 2, 3, &mut ChaCha8Rng::seed_from_u64(6));
    let mut inputs: Vec<Tensor<f64>> = store.named().map(|(_, t)| t.clone()).collect();
    inputs.push(random(&[n, 3], 7));
    let c = gradcheck::check(&inputs, step, |t, v| {
        let p = Bound::from_vars(v[..3].to_vec());
        let (out, alpha) = gat.forward(t, &p, v[3], &topo)?;
        let a = weighted_sum(t, out, 8)?;
        let b = weighted_sum(t, alpha, 9)?;
        t.add(a, b)
    })?;
    worst.push(("gat", c.max_relative_error()));

    let mut store = ParamStore::<f64>::new();
    let gcn = GcnLayer::new(&mut store, "g", 3, 4, &mut ChaCha8Rng::seed_from_u64(10));
    let mut inputs: Vec<Tensor<f64>> = store.named().map(|(_, t)| t.clone()).collect();
    let nparams = inputs.len();
    inputs.push(random(&[n, 3], 11));
    let c = gradcheck::check(&inputs, step, |t, v| {
        let p = Bound::from_vars(v[..nparams].to_vec());
        let out = gcn.forward(t, &p, v[nparams], &topo)?;
        weighted_sum(t, out, 12)
    })?;
    worst.push(("gcn", c.max_relative_error()));

    let truth = Tensor::<f64>::from_fn([2, 3, 3, 3], |i| ((i * 5) % 7) as f64 / 6.0);
    let logits = random(&[2, 3, 3, 3], 13);
    let c = gradcheck::check(&[logits.clone()], step, |t, v| {
        let p = t.sigmoid(v[0]);
        let y = t.constant(truth.clone());
        let d = dice_coefficients(t, y, p)?;
        Ok(t.mean_all(d))
    })?;
    worst.push(("dice", c.max_relative_error()));
    let c = gradcheck::check(&[logits.clone()], step, |t, v| {
        let p = t.sigmoid(v[0]);
        let y = t.constant(truth.clone());
        bce(t, y, p)
    })?;
    worst.push(("bce", c.max_relative_error()));
    let c = gradcheck::check(&[logits], step, |t, v| {
        let p = t.sigmoid(v[0]);
        let y = t.constant(truth.clone());
        combo_loss(t, y, p)
    })?;
    worst.push(("combo", c.max_relative_error()));

    let targets = Tensor::<f64>::from_fn([4, 3], |i| [0.2, 0.5, 0.3][i % 3]);
    let c = gradcheck::check(&[random(&[4, 3], 14)], step, |t, v| {
        let lp = t.log_softmax(v[0], 1)?;
        let y = t.constant(targets.clone());
        soft_cross_entropy(t, lp, y)
    })?;
    worst.push(("cross-entropy", c.max_relative_error()));

    let ok = worst.iter().all(|&(_, e)| e < 1e-4);
    let detail = worst.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect::<Vec<_>>().join(" ");
    Ok((ok, detail))
}

/// Minimum over every injective row→column map (rows ≤ cols).
fn brute_force(rows: usize, cols: usize, cost: &[f64]) -> f64 {
    fn go(r: usize, rows: usize, cols: usize, cost: &[f64], used: &mut [bool], acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                go(r + 1, rows, cols, cost, used, acc + cost[r * cols + c], best);
                used[c] = false;
            }
        }
    }
    if rows > cols {
        let t: Vec<f64> = (0..cols * rows).map(|k| cost[(k % rows) * cols + k / rows]).collect();
        return brute_force(cols, rows, &t);
    }
    let mut best = f64::INFINITY;
    go(0, rows, cols, cost, &mut vec![false; cols], 0.0, &mut best);
    best
}

fn assignment_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut shapes: Vec<(usize, usize)> = (0..200).map(|_| (rng.random_range(1..=7), rng.random_range(1..=7))).collect();
    shapes.extend(std::iter::repeat_n((5, 8), 20));
    shapes.extend(std::iter::repeat_n((8, 5), 20));
    let mut mismatches = 0;
    for &(r, c) in &shapes {
        // Integer costs keep every sum exact, so equality is meaningful.
        let cost: Vec<f64> = (0..r * c).map(|_| rng.random_range(0..100) as f64).collect();
        let a = hungarian(r, c, &cost)?;
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        let valid = a.pairs.len() == r.min(c) && cols.len() == a.pairs.len();
        let direct: f64 = a.pairs.iter().map(|&(i, j)| cost[i * c + j]).sum();
        if !valid || direct != a.total_cost || a.total_cost != brute_force(r, c, &cost) {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{} matrices, {mismatches} mismatches", shapes.len())))
}

fn rotational_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut exact = true;
    for _ in 0..20 {
        let rows: Vec<Vec<f32>> = (0..40).map(|_| (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        exact &= chip_similarity(&rows, &shuffled)? == 1.0;
    }
    let synth = synthetic_tile(&SyntheticConfig {
        size: 256,
        bands: 12,
        seed: 5,
    })?;
    let mut worst = f64::INFINITY;
    for chip in chip_tile(&synth.tile, 128)? {
        let turned = chip.rotated(1);
        let params = SlicParams::with_segments(120);
        let (sa, sb) = (slic(&chip, &params)?, slic(&turned, &params)?);
        let ea = segment_means(&sa, &chip.data, chip.bands)?;
        let eb = segment_means(&sb, &turned.data, turned.bands)?;
        worst = worst.min(chip_similarity(&ea, &eb)?);
    }
    Ok((exact && worst >= 0.999, format!("permuted rows exact={exact}, rotated chips min={worst:.5}")))
}

fn fcm_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let normal = Normal::new(0.0f32, 0.3).unwrap();
    let centres: Vec<Vec<f32>> = (0..3).map(|_| (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (label, c) in centres.iter().enumerate() {
        for _ in 0..200 {
            rows.push(c.iter().map(|&v| v + normal.sample(&mut rng)).collect::<Vec<f32>>());
            truth.push(label);
        }
    }
    let fit = fcm_fit(&Spectra::from_rows(&rows), &FcmParams::new(3))?;
    let mut max_row_err = 0.0f64;
    let mut assigned = Vec::new();
    for r in &rows {
        let u = fit.model.membership(r);
        max_row_err = max_row_err.max((u.iter().sum::<f64>() - 1.0).abs());
        assigned.push((0..u.len()).max_by(|&a, &b| u[a].total_cmp(&u[b])).unwrap());
    }
    let monotone = fit.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    // Independent check: the hard partition is a relabelling of the truth.
    let mut confusion = [[0usize; 3]; 3];
    for (&t, &a) in truth.iter().zip(&assigned) {
        confusion[t][a] += 1;
    }
    let bijective = confusion.iter().all(|row| row.iter().filter(|&&v| v > 0).count() == 1)
        && (0..3).all(|c| confusion.iter().filter(|row| row[c] > 0).count() == 1);
    let ari = adjusted_rand_index(&truth, &assigned);
    let ok = max_row_err <= 1e-6 && monotone && bijective && ari == 1.0;
    Ok((
        ok,
        format!(
            "row err {max_row_err:.1e}, monotone={monotone}, {} iters, ARI={ari}",
            fit.iterations
        ),
    ))
}

fn chipping() -> Outcome {
    let (rows, cols) = chip_grid(10980, 10980, 256)?;
    let splits = split_assignments(rows * cols);
    let test = splits.iter().filter(|&&s| s == Split::Test).count();
    let train = splits.iter().filter(|&&s| s == Split::Train).count();
    let ok = (rows, cols) == (42, 42) && test == 441 && train == 1323;
    Ok((ok, format!("{rows}x{cols} chips, {train} train / {test} test")))
}

fn random_graph(seed: u64, s: usize, dim: usize, k: usize) -> terralabel::Result<SegmentGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<[f64; 2]> = (0..s).map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]).collect();
    let features = (0..s).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    build_graph("g_r000_c000", &centroids, features, k)
}

/// Hops from every node to `target`, following aggregation edges `i ← j`.
fn hops_to(graph: &SegmentGraph, target: usize) -> Vec<usize> {
    let mut reverse = vec![Vec::new(); graph.len()];
    for &(i, j) in &graph.edges {
        reverse[j].push(i);
    }
    let mut dist = vec![usize::MAX; graph.len()];
    dist[target] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(j) = queue.pop_front() {
        for &i in &reverse[j] {
            if dist[i] == usize::MAX {
                dist[i] = dist[j] + 1;
                queue.push_back(i);
            }
        }
    }
    dist
}

fn graph_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let centroids: Vec<[f64; 2]> = (0..500).map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)]).collect();
    let edges = knn_edges(&centroids, 8)?.len();

    let g = random_graph(52, 500, 64, 8)?;
    let gat = GnnModel::init(GnnConfig::new(Variant::Gat, 64, 8), 1)?;
    let gcn = GnnModel::init(GnnConfig::new(Variant::Gcn, 64, 8), 1)?;
    let widths = (gat.embed(&g)?[0].len(), gcn.embed(&g)?[0].len());

    let mut attention_err = 0.0f64;
    for (edges, alpha) in gat.attention(&g)? {
        let heads = alpha[0].len();
        let mut sums = vec![vec![0.0f64; heads]; g.len()];
        for (&(i, _), a) in edges.iter().zip(&alpha) {
            for h in 0..heads {
                sums[i][h] += a[h] as f64;
            }
        }
        attention_err = sums.iter().flatten().fold(attention_err, |m, s| m.max((s - 1.0).abs()));
    }

    let mut receptive_ok = true;
    // A jittered line with K=2 gives long shortest paths; random scatter
    // tends to form closed kNN cliques.
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let line: Vec<[f64; 2]> = (0..40).map(|i| [i as f64 * 4.0 + rng.random_range(-1.0..1.0), 0.0]).collect();
    let feats = (0..40).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let small = build_graph("g_r000_c001", &line, feats, 2)?;
    for variant in [Variant::Gat, Variant::Gcn] {
        let model = GnnModel::init(GnnConfig::new(variant, 6, 4), 2)?;
        let before = model.embed_layer(&small, LayerChoice::L2)?;
        for target in [0, 17, 31] {
            let mut perturbed = small.clone();
            for v in perturbed.features[target].iter_mut() {
                *v += 1.0;
            }
            let after = model.embed_layer(&perturbed, LayerChoice::L2)?;
            let hops = hops_to(&small, target);
            for i in 0..small.len() {
                let changed = before[i] != after[i];
                receptive_ok &= changed == (hops[i] <= 2);
            }
            receptive_ok &= hops.iter().any(|&h| h > 2 && h != usize::MAX) && hops.iter().any(|&h| h == 2);
        }
    }
    let ok = edges == 4000 && widths == (64, 60) && attention_err <= 1e-6 && receptive_ok;
    Ok((
        ok,
        format!(
            "{edges} edges, widths GAT {} GCN {}, attention err {attention_err:.1e}, 2-hop exact={receptive_ok}",
            widths.0, widths.1
        ),
    ))
}

fn umap_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let dim = 10;
    let centres: Vec<Vec<f64>> = (0..3).map(|c| (0..dim).map(|d| if d == c { 10.0 } else { 0.0 }).collect()).collect();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (l, c) in centres.iter().enumerate() {
        for _ in 0..100 {
            points.push(c.iter().map(|&v| v + normal.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(l);
        }
    }
    let n = points.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let params = UmapParams::default();
    let a = project_distances(ids.clone(), &dist, Level::Chip, params)?;
    let b = project_distances(ids, &dist, Level::Chip, params)?;
    let purity = neighbour_purity(&a.coords, &labels, 10);
    let trust = trustworthiness(&dist, &a.coords, 10);
    let deterministic = a.coords == b.coords;
    Ok((
        purity >= 0.9 && trust >= 0.85 && deterministic,
        format!("purity@10 {purity:.3}, trustworthiness {trust:.3}, deterministic={deterministic}"),
    ))
}

const E2E_EPOCHS: usize = 15;

fn end_to_end() -> Outcome {
    let synth = synthetic_tile(&SyntheticConfig::default())?;
    let cfg = PipelineConfig {
        chip_size: 128,
        clusters: 8,
        desk_scale: true,
        n_segments: 120,
        k: 8,
        unet: TrainConfig {
            max_epochs: E2E_EPOCHS,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    let fs = FeatureStage::from_tile(&synth.tile, &cfg)?;
    let gs = fs.graph_stage(cfg.n_segments, cfg.k, cfg.variant)?;
    let (sim, _) = fs.similarity(&gs)?;
    let proj = project_chips(&sim, cfg.umap)?;
    let truth = synth.chip_materials(cfg.chip_size);
    let labels: Vec<usize> = proj
        .ids
        .iter()
        .map(|id| truth.iter().find(|t| &t.0 == id).map_or(usize::MAX, |t| t.1))
        .collect();
    let agreement = neighbour_purity(&proj.coords, &labels, 5);
    Ok((
        agreement >= 0.8,
        format!(
            "{} chips, U-Net {} epochs, k=5 agreement {agreement:.3}",
            proj.len(),
            fs.unet_summary.epochs
        ),
    ))
}

fn small_stage(clusters: usize, chip_size: usize, n_segments: usize, epochs: usize) -> terralabel::Result<FeatureStage> {
    let synth = synthetic_tile(&SyntheticConfig {
        size: if chip_size == 128 { 512 } else { 1024 },
        bands: 12,
        seed: 7,
    })?;
    let cfg = PipelineConfig {
        chip_size,
        clusters,
        desk_scale: true,
        n_segments,
        unet: TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::default()
        },
        ..PipelineConfig::default()
    };
    FeatureStage::from_tile(&synth.tile, &cfg)
}

fn table_shape(reports: &[MetricReport], rows: usize) -> bool {
    let table = render_table(reports);
    let mut lines = table.lines();
    let header = lines.next().unwrap_or_default();
    let columns = ["GLCM↓", "LBP↑", "SSIM↑", "SAM↓"];
    let header_ok = columns.iter().all(|c| header.contains(c)) && header.split_whitespace().count() == 5;
    let body: Vec<&str> = lines.filter(|l| !l.trim().is_empty() && !l.starts_with('-')).collect();
    let finite = reports.iter().all(|r| {
        let m = r.measures;
        [m.glcm, m.lbp, m.ssim, m.sam].iter().all(|v| v.is_finite())
    });
    header_ok && body.len() == rows && reports.len() == rows && finite
}

fn heap_permutations(a: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == 1 {
        f(a);
        return;
    }
    for i in 0..k {
        heap_permutations(a, k - 1, f);
        if k % 2 == 0 {
            a.swap(i, k - 1);
        } else {
            a.swap(0, k - 1);
        }
    }
}

fn evaluation_protocols() -> Outcome {
    // Self-comparison: a chip and an identical copy under another id.
    let synth = synthetic_tile(&SyntheticConfig {
        size: 128,
        bands: 12,
        seed: 9,
    })?;
    let a = chip_tile(&synth.tile, 128)?.remove(0);
    let mut b = a.clone();
    b.id = format!("{}_copy", a.id);
    let seg = slic(&a, &SlicParams::with_segments(40))?;
    let emb = segment_means(&seg, &a.data, a.bands)?;
    let pair = [
        EvalChip { chip: &a, segments: &seg, embeddings: &emb },
        EvalChip { chip: &b, segments: &seg, embeddings: &emb },
    ];
    let mut ideal = true;
    for protocol in [Protocol::Feature, Protocol::Context] {
        let m = evaluate(protocol, &pair)?.measures;
        ideal &= m.glcm.abs() < 1e-12 && (m.lbp - 1.0).abs() < 1e-12 && (m.ssim - 1.0).abs() < 1e-12 && m.sam.abs() < 1e-12;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut brute_ok = true;
    for _ in 0..5 {
        let x: Vec<Vec<f32>> = (0..8).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<Vec<f32>> = (0..8).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pairs = context_pairs(&x, &y)?;
        let cost = euclidean_cost(&x, &y);
        let got: f64 = pairs.iter().map(|&(i, j)| cost[i * 8 + j]).sum();
        let mut best = f64::INFINITY;
        heap_permutations(&mut (0..8).collect(), 8, &mut |p| {
            best = best.min((0..8).map(|i| cost[i * 8 + p[i]]).sum());
        });
        brute_ok &= pairs.len() == 8 && (got - best).abs() < 1e-9;
    }

    let mut feature = Vec::new();
    let mut context = Vec::new();
    for clusters in [2, 8, 18] {
        let fs = small_stage(clusters, 128, 120, 2)?;
        for variant in [Variant::Gcn, Variant::Gat] {
            let gs = fs.graph_stage(120, 8, variant)?;
            feature.push(fs.evaluate(&gs, Protocol::Feature, LayerChoice::L2)?);
            context.push(fs.evaluate(&gs, Protocol::Context, LayerChoice::L2)?);
        }
    }
    let tags: Vec<&str> = feature.iter().map(|r| r.model.as_str()).collect();
    let expected = ["GCN 2", "GAT 2", "GCN 8", "GAT 8", "GCN 18", "GAT 18"];
    let shape_ok = tags == expected && table_shape(&feature, 6) && table_shape(&context, 6);
    emit(&render_table(&feature));
    emit(&render_table(&context));
    Ok((
        ideal && brute_ok && shape_ok,
        format!("self-comparison ideal={ideal}, 8! brute force={brute_ok}, 6x4 tables={shape_ok}"),
    ))
}

fn sweeps() -> Outcome {
    let fs = small_stage(8, 256, 500, 3)?;
    let base = fs.graph_stage(500, 8, Variant::Gcn)?;
    let axes: [(SweepAxis, [&str; 3]); 3] = [
        (SweepAxis::K, ["4", "8", "12"]),
        (SweepAxis::N, ["200", "500", "800"]),
        (SweepAxis::Layer, ["generation", "l1", "l2"]),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (axis, values) in axes {
        let values: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        let reports = sweep(&fs, &base, axis, &values, Protocol::Context)?;
        emit(&render_table(&reports));
        let params_ok = reports.iter().zip(&values).all(|(r, v)| match axis {
            SweepAxis::K => r.params.k.map(|k| k.to_string()).as_deref() == Some(v),
            SweepAxis::N => r.params.n.map(|n| n.to_string()).as_deref() == Some(v),
            SweepAxis::Layer => r.params.layer.as_deref() == Some(v),
        });
        ok &= params_ok && table_shape(&reports, 3);
        detail.push(format!("{axis:?} {:.0}s", reports.iter().map(|r| r.seconds).sum::<f64>()));
    }
    Ok((ok, detail.join(", ")))
}

#[test]
fn primary_criteria() {
    let results = [
        run("gradient suite", 120.0, gradient_suite),
        run("assignment oracle", 30.0, assignment_oracle),
        run("rotational invariance", f64::INFINITY, rotational_invariance),
        run("fcm", 10.0, fcm_criterion),
        run("chipping arithmetic", f64::INFINITY, chipping),
        run("graph structure", f64::INFINITY, graph_structure),
        run("umap quality", 60.0, umap_quality),
        run("end-to-end desk pipeline", 1800.0, end_to_end),
        run("evaluation protocols", f64::INFINITY, evaluation_protocols),
        run("sweep harnesses", f64::INFINITY, sweeps),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    emit(&format!("{passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len());
}
