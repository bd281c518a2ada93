//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass substrings as arguments to run a subset.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor};
use partlayout::baselines::{
    gumbel_argmax, gumbel_noise, gumbel_softmax, train_cggan, BmVae, BmVaeConfig, BsLstm, BsLstmConfig, CgGan,
    CgGanConfig,
};
use partlayout::boxvae::{
    adjacency_bce, box_iou, box_iou_loss, boxvae_recon_loss, pairwise_center_loss, presence_nll, BoxDecodeOutput,
    BoxVae, BoxVaeConfig, GraphBatch, EPS_IOU, EPS_PROB,
};
use partlayout::dataset::{split_corpus, synth_generate, Corpus, Split, SplitRatios, SynthConfig};
use partlayout::eval::{generation_metrics, reconstruction_metrics};
use partlayout::gcn::{gcn_forward, gcn_layer, normalize_adjacency, GcnWeights};
use partlayout::labelmapvae::{paste_orders, LabelMapConfig, LabelMapVae};
use partlayout::nn::rng_stream;
use partlayout::pipeline::{add_part, edit_and_regenerate, generate_layout, GenerationRequest, LayoutModel};
use partlayout::training::{
    cyclic_beta, elbo_loss, freeze_gate, train_stage, AnnealState, Stage, StageModel, TrainConfig, TrainData,
};
use partlayout::{DType, Execution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn values(x: &Tensor) -> Vec<f64> {
    x.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn scalar(x: &Tensor) -> f64 {
    values(x)[0]
}

// ---------------------------------------------------------------- losses

struct LossCase {
    p: usize,
    pred_presence: Vec<f64>,
    pred_boxes: Vec<[f64; 4]>,
    pred_adj: Vec<f64>,
    presence: Vec<f64>,
    boxes: Vec<[f64; 4]>,
    adj: Vec<f64>,
}

fn random_case(rng: &mut ChaCha8Rng) -> LossCase {
    let p = rng.random_range(2..=8);
    let mut presence: Vec<f64> = (0..p).map(|_| rng.random_bool(0.6) as u8 as f64).collect();
    presence[rng.random_range(0..p)] = 1.0;
    let boxes = presence
        .iter()
        .map(|&l| {
            if l == 0.0 {
                return [0.0; 4];
            }
            let (x0, y0) = (rng.random_range(-1.0..0.8), rng.random_range(-1.0..0.8));
            [x0, y0, rng.random_range(x0 + 0.01..=1.0), rng.random_range(y0 + 0.01..=1.0)]
        })
        .collect();
    let mut adj = vec![0.0; p * p];
    let mut pred_adj = vec![0.0; p * p];
    for m in 0..p {
        pred_adj[m * p + m] = rng.random_range(0.0..1.0);
        for n in 0..m {
            let a = (presence[m] * presence[n] > 0.0 && rng.random_bool(0.5)) as u8 as f64;
            adj[m * p + n] = a;
            adj[n * p + m] = a;
            let q = rng.random_range(0.0..1.0);
            pred_adj[m * p + n] = q;
            pred_adj[n * p + m] = q;
        }
    }
    let pred_presence = (0..p)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    let pred_boxes = (0..p).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0))).collect();
    LossCase {
        p,
        pred_presence,
        pred_boxes,
        pred_adj,
        presence,
        boxes,
        adj,
    }
}

fn oracle_bce(q: f64, target: f64) -> f64 {
    let q = q.clamp(EPS_PROB, 1.0 - EPS_PROB);
    -(target * q.ln() + (1.0 - target) * (1.0 - q).ln())
}

fn oracle_iou(pred: [f64; 4], target: [f64; 4]) -> f64 {
    let (px0, px1) = (pred[0].min(pred[2]), pred[0].max(pred[2]));
    let (py0, py1) = (pred[1].min(pred[3]), pred[1].max(pred[3]));
    let iw = (px1.min(target[2]) - px0.max(target[0])).max(0.0);
    let ih = (py1.min(target[3]) - py0.max(target[1])).max(0.0);
    let inter = iw * ih;
    let union = (px1 - px0) * (py1 - py0) + (target[2] - target[0]) * (target[3] - target[1]) - inter;
    inter / union
}

fn center_dist(a: [f64; 4], b: [f64; 4]) -> f64 {
    let dx = (a[0] + a[2]) / 2.0 - (b[0] + b[2]) / 2.0;
    let dy = (a[1] + a[3]) / 2.0 - (b[1] + b[3]) / 2.0;
    (dx * dx + dy * dy).sqrt()
}

/// `[presence, boxes, center, adjacency, total]` computed term by term.
fn loss_oracle(c: &LossCase) -> [f64; 5] {
    let p = c.p;
    let pf = p as f64;
    let mut presence = 0.0;
    for k in 0..p {
        presence += oracle_bce(c.pred_presence[k], c.presence[k]);
    }
    presence /= pf;
    let mut boxes = 0.0;
    for k in 0..p {
        if c.presence[k] == 1.0 {
            let mut mse = 0.0;
            for j in 0..4 {
                mse += (c.pred_boxes[k][j] - c.boxes[k][j]).powi(2);
            }
            boxes += mse - (oracle_iou(c.pred_boxes[k], c.boxes[k]) + EPS_IOU).ln();
        }
    }
    boxes /= pf;
    let mut center = 0.0;
    for m in 0..p {
        for n in 0..p {
            if m != n && c.presence[m] == 1.0 && c.presence[n] == 1.0 {
                let d = center_dist(c.boxes[m], c.boxes[n]);
                let dh = center_dist(c.pred_boxes[m], c.pred_boxes[n]);
                center += (d - dh).powi(2);
            }
        }
    }
    center /= pf * (pf - 1.0);
    let mut adjacency = 0.0;
    for e in 0..p * p {
        adjacency += oracle_bce(c.pred_adj[e], c.adj[e]);
    }
    adjacency /= pf * pf;
    [presence, boxes, center, adjacency, presence + boxes + center + adjacency]
}

fn tensors(c: &LossCase) -> (BoxDecodeOutput, GraphBatch) {
    let p = c.p;
    let flat = |b: &[[f64; 4]]| b.iter().flatten().copied().collect::<Vec<_>>();
    let presence = t(c.presence.clone(), &[1, p]);
    let boxes = t(flat(&c.boxes), &[1, p, 4]);
    let category = t(vec![1.0], &[1, 1]);
    let out = BoxDecodeOutput {
        presence: t(c.pred_presence.clone(), &[1, p]),
        boxes: t(flat(&c.pred_boxes), &[1, p, 4]),
        adjacency: t(c.pred_adj.clone(), &[1, p, p]),
    };
    let batch = GraphBatch {
        x: Tensor::cat(&[&presence.unsqueeze(2).unwrap(), &boxes], 2).unwrap(),
        adjacency: t(c.adj.clone(), &[1, p, p]),
        cond: Tensor::cat(&[&category, &presence], 1).unwrap(),
        presence,
        boxes,
        category,
    };
    (out, batch)
}

fn loss_oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0f64;
    for _ in 0..100 {
        let c = random_case(&mut rng);
        let (out, batch) = tensors(&c);
        let got = boxvae_recon_loss(&out, &batch).map_err(|e| e.to_string())?;
        let got = [&got.presence, &got.boxes, &got.center, &got.adjacency, &got.total].map(scalar);
        let want = loss_oracle(&c);
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    let unit = t(vec![0.0, 0.0, 1.0, 1.0], &[4]);
    let shifted = t(vec![0.5, 0.0, 1.5, 1.0], &[4]);
    let iou = scalar(&box_iou(&unit, &shifted).unwrap());
    let ln3 = 3f64.ln();
    let iou_nll_err = (-iou.ln() - ln3).abs();
    let floored = scalar(&box_iou_loss(&unit, &shifted).unwrap());
    let floored_err = (floored + (1.0 / 3.0 + EPS_IOU).ln()).abs();
    let half = t(vec![0.5; 4], &[1, 4]);
    let labels = t(vec![1.0, 0.0, 1.0, 1.0], &[1, 4]);
    let bern_err = (scalar(&presence_nll(&half, &labels).unwrap()) - 2f64.ln()).abs();
    let half_adj = t(vec![0.5; 16], &[1, 4, 4]);
    let adj_target = t((0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect(), &[1, 4, 4]);
    let adj_err = (scalar(&adjacency_bce(&half_adj, &adj_target).unwrap()) - 2f64.ln()).abs();
    let one = t(vec![1.0, 0.0], &[1, 2]);
    let two = t(vec![0.0, 0.0, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0], &[1, 2, 4]);
    let single = scalar(&pairwise_center_loss(&two, &two.zeros_like().unwrap(), &one).unwrap());
    let spot = [iou_nll_err, floored_err, bern_err, adj_err, single.abs()]
        .into_iter()
        .fold(0f64, f64::max);
    check(
        worst < 1e-6 && spot < 1e-9,
        format!(
            "100 instances max |err| {worst:.2e} (tol 1e-6); IoU half-overlap {iou:.12} -> -ln IoU = {:.10}, \
             floored loss {floored:.10}; uniform Bernoulli ln2; max spot err {spot:.2e} (tol 1e-9)",
            -iou.ln()
        ),
    )
}

// ---------------------------------------------------------------- gcn

fn random_graph(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    let mut a = vec![0.0; p * p];
    for m in 0..p {
        for n in 0..m {
            let e = rng.random_bool(0.4) as u8 as f64;
            a[m * p + n] = e;
            a[n * p + m] = e;
        }
    }
    a
}

fn oracle_layer(h: &[f64], a: &[f64], w: &[f64], p: usize, fi: usize, fo: usize) -> Vec<f64> {
    let deg: Vec<f64> = (0..p).map(|i| 1.0 + (0..p).map(|j| a[i * p + j]).sum::<f64>()).collect();
    let mut out = vec![0.0; p * fo];
    for i in 0..p {
        for j in 0..p {
            let aij = if i == j { 1.0 } else { a[i * p + j] };
            if aij == 0.0 {
                continue;
            }
            let coef = aij / (deg[i] * deg[j]).sqrt();
            for o in 0..fo {
                let mut hw = 0.0;
                for f in 0..fi {
                    hw += h[j * fi + f] * w[f * fo + o];
                }
                out[i * fo + o] += coef * hw;
            }
        }
    }
    out.iter().map(|v| v.max(0.0)).collect()
}

fn gcn_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (f0, f1, f2) = (5, 6, 4);
    let mut layer_err = 0f64;
    let mut forward_err = 0f64;
    let mut perm_err = 0f64;
    for _ in 0..50 {
        let p = rng.random_range(1..=8);
        let a = random_graph(&mut rng, p);
        let x: Vec<f64> = (0..p * f0).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w1: Vec<f64> = (0..f0 * f1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..f1 * f2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ta, tx) = (t(a.clone(), &[p, p]), t(x.clone(), &[p, f0]));
        let weights = GcnWeights::from_tensors(t(w1.clone(), &[f0, f1]), t(w2.clone(), &[f1, f2])).unwrap();
        let a_hat = normalize_adjacency(&ta).map_err(|e| e.to_string())?;
        let h1 = oracle_layer(&x, &a, &w1, p, f0, f1);
        let got1 = values(&gcn_layer(&tx, &a_hat, &weights.w1).unwrap());
        layer_err = got1.iter().zip(&h1).map(|(g, w)| (g - w).abs()).fold(layer_err, f64::max);
        let h2 = oracle_layer(&h1, &a, &w2, p, f1, f2);
        let got = values(&gcn_forward(&tx, &ta, &weights).unwrap());
        forward_err = got.iter().zip(&h2).map(|(g, w)| (g - w).abs()).fold(forward_err, f64::max);

        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut rng);
        let pa: Vec<f64> = (0..p * p).map(|e| a[perm[e / p] * p + perm[e % p]]).collect();
        let px: Vec<f64> = (0..p * f0).map(|e| x[perm[e / f0] * f0 + e % f0]).collect();
        let permuted = values(&gcn_forward(&t(px, &[p, f0]), &t(pa, &[p, p]), &weights).unwrap());
        for i in 0..p {
            for o in 0..f2 {
                perm_err = perm_err.max((permuted[i * f2 + o] - got[perm[i] * f2 + o]).abs());
            }
        }
    }
    let worst = layer_err.max(forward_err).max(perm_err);
    check(
        worst < 1e-6,
        format!(
            "50 graphs p<=8: layer vs neighbour sum {layer_err:.2e}, two layers {forward_err:.2e}, \
             permutation {perm_err:.2e} (tol 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- gradients

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)` at ten parameter entries
/// drawn at random. Entries whose central difference changes with the step
/// size sit on a kink (ReLU, clamp, corner sort) and are redrawn.
fn gradient_check<M: StageModel>(model: &M, data: &TrainData, batch: &[usize], seed: u64) -> Result<f64, String> {
    let lambda = 0.5;
    let objective = || -> f64 {
        let (recon, kl) = model.losses(data, batch, &mut rng_stream(seed, 5)).unwrap();
        scalar(&elbo_loss(&recon, &kl, lambda).unwrap())
    };
    let (recon, kl) = model.losses(data, batch, &mut rng_stream(seed, 5)).unwrap();
    let grads = elbo_loss(&recon, &kl, lambda).unwrap().backward().unwrap();
    let vars = model.store().named_vars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let (mut worst, mut checked, mut draws) = (0f64, 0, 0);
    let h = 1e-5;
    while checked < 10 {
        draws += 1;
        if draws > 200 {
            return Err(format!("seed {seed}: only {checked} smooth parameters in 200 draws"));
        }
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let base = values(var.as_tensor());
        let k = rng.random_range(0..base.len());
        let analytic = grads.get(var).map_or(0.0, |g| values(g)[k]);
        let at = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            var.set(&t(v, var.dims())).unwrap();
            objective()
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let half = (at(h / 2.0) - at(-h / 2.0)) / h;
        var.set(&t(base, var.dims())).unwrap();
        if (numeric - half).abs() > 1e-6 * numeric.abs().max(1e-3) {
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel >= 1e-3 {
            return Err(format!("seed {seed}: {name}[{k}] analytic {analytic:e} numeric {numeric:e}"));
        }
        worst = worst.max(rel);
        checked += 1;
    }
    Ok(worst)
}

fn gradient_suite(corpus: &Corpus) -> Outcome {
    let data = TrainData::new(corpus).unwrap();
    let (p, m) = (corpus.schemas.p_max, corpus.schemas.num_categories());
    let batch: Vec<usize> = vec![0, corpus.len() / 2, corpus.len() - 1];
    let (mut box_worst, mut mask_worst) = (0f64, 0f64);
    for seed in 0..10 {
        let boxvae = BoxVae::new(BoxVaeConfig::new(p, m), seed, DType::F64).unwrap();
        box_worst = box_worst.max(gradient_check(&boxvae, &data, &batch, seed)?);
        let labelmap = LabelMapVae::new(LabelMapConfig::new(p, m), seed, DType::F64).unwrap();
        mask_worst = mask_worst.max(gradient_check(&labelmap, &data, &batch[..2], seed)?);
    }
    Ok(format!(
        "10 parameters x 10 seeds per stage: max rel err box {box_worst:.2e}, mask {mask_worst:.2e} (tol 1e-3)"
    ))
}

// ---------------------------------------------------------------- annealing

fn anneal_suite() -> Outcome {
    let mut periodic = true;
    for len in [1, 2, 5, 8, 13] {
        for s in 0..4 * len {
            periodic &= cyclic_beta(s, len, 0.7) == cyclic_beta(s + len, len, 0.7);
            periodic &= cyclic_beta(s + 3 * len, len, 0.7) == cyclic_beta(s, len, 0.7);
        }
    }
    let len = 8;
    let ramp: Vec<f64> = (0..len).map(|s| cyclic_beta(s, len, 1.0)).collect();
    let shape = ramp == [0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0];

    let s = AnnealState::new(10, 1.0, 0.1);
    let at_gap = |train: f64, val: f64, st: AnnealState| freeze_gate(train, val, st).frozen;
    let gates = [
        !at_gap(0.0, 0.1, s),
        !at_gap(2.0, 2.0625, s),
        at_gap(0.0, 0.1 + 1e-12, s),
        at_gap(2.0, 2.25, s),
        !at_gap(2.0, 1.0, s),
    ];
    let mut st = s;
    for _ in 0..3 {
        st.tick();
    }
    st = freeze_gate(2.0, 2.25, st);
    let held = (st.step, st.lambda);
    for _ in 0..5 {
        st.tick();
    }
    let holds = st.frozen && (st.step, st.lambda) == held;
    st = freeze_gate(0.0, 0.1, st);
    st.tick();
    let released = !st.frozen && st.step == held.0 + 1 && st.lambda == cyclic_beta(held.0 + 1, 10, 1.0);
    check(
        periodic && shape && gates.iter().all(|&g| g) && holds && released,
        format!(
            "periodic {periodic}, ramp-hold shape {shape}, gate at gap>0.1 {gates:?}, held while frozen {holds}, \
             release at gap=0.1 {released}"
        ),
    )
}

// ---------------------------------------------------------------- gumbel

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn gumbel_suite() -> Outcome {
    let h = [1.0, 0.0, -0.5, 2.0, 0.3];
    let k = h.len();
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = vec![0usize; k];
    let mut argmax_agrees = true;
    for _ in 0..draws {
        let g = gumbel_noise(&mut rng, k);
        let y = gumbel_softmax(&h, &g, 1.0);
        let i = (0..k).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        argmax_agrees &= i == gumbel_argmax(&h, &g);
        counts[i] += 1;
    }
    let probs = softmax(&h);
    let stat: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &q)| {
            let e = q * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(0.99);

    let mut uniform_dev = 0f64;
    let mut onehot_dev = 0f64;
    let mut simplex = true;
    for _ in 0..1000 {
        let hh: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = gumbel_softmax(&hh, &g, 1e3);
        simplex &= (y.iter().sum::<f64>() - 1.0).abs() < 1e-6 && y.iter().all(|&v| v >= 0.0);
        uniform_dev = y.iter().map(|v| (v - 1.0 / k as f64).abs()).fold(uniform_dev, f64::max);

        let mut s: Vec<f64> = (0..k).map(|i| i as f64 * 0.2).collect();
        s.shuffle(&mut rng);
        let g: Vec<f64> = s.iter().zip(&hh).map(|(a, b)| a - b).collect();
        let y = gumbel_softmax(&hh, &g, 0.01);
        let top = (0..k).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        onehot_dev = (0..k)
            .map(|i| (y[i] - (i == top) as u8 as f64).abs())
            .fold(onehot_dev, f64::max);
    }
    check(
        stat < critical && argmax_agrees && simplex && uniform_dev < 1e-3 && onehot_dev < 1e-6,
        format!(
            "chi-square {stat:.2} < {critical:.2} (df {}, alpha 0.01, {draws} draws); tau=1e3 max dev from \
             uniform {uniform_dev:.2e}; tau=0.01 max dev from one-hot {onehot_dev:.2e}",
            k - 1
        ),
    )
}

// ---------------------------------------------------------------- end to end

const BOX_EPOCHS: usize = 200;
const MASK_EPOCHS: usize = 12;

fn e2e_corpus() -> Corpus {
    let cfg = SynthConfig {
        instances_per_category: 265,
        ..SynthConfig::default()
    };
    let raw = synth_generate(&cfg, 11).unwrap();
    split_corpus(&raw, SplitRatios::default(), 11).unwrap().0
}

fn train_layout_model(corpus: &Corpus) -> Result<LayoutModel, String> {
    let data = TrainData::new(corpus).map_err(|e| e.to_string())?;
    let (p, m) = (corpus.schemas.p_max, corpus.schemas.num_categories());
    let box_model = BoxVaeConfig {
        cond_concat: true,
        ..BoxVaeConfig::new(p, m)
    };
    let boxvae = BoxVae::new(box_model, 1, DType::F32).unwrap();
    let mut box_cfg = TrainConfig {
        epochs: BOX_EPOCHS,
        batch_size: 32,
        learning_rate: 1e-3,
        seed: 1,
        ..TrainConfig::preset(Stage::BoxVae)
    };
    box_cfg.anneal.lambda_max = 0.01;
    let started = Instant::now();
    let report = train_stage(&boxvae, &data, &box_cfg, None).map_err(|e| e.to_string())?;
    let last = report.metrics.last().unwrap();
    println!(
        "    box stage: {} epochs in {:.0?}, final train {:.4} val {:.4}",
        report.metrics.len(),
        started.elapsed(),
        last.train_recon,
        last.val_recon
    );
    let labelmap = LabelMapVae::new(LabelMapConfig::new(p, m), 2, DType::F32).unwrap();
    let mask_cfg = TrainConfig {
        epochs: MASK_EPOCHS,
        batch_size: 8,
        seed: 2,
        ..TrainConfig::preset(Stage::LabelMapVae)
    };
    let started = Instant::now();
    let report = train_stage(&labelmap, &data, &mask_cfg, None).map_err(|e| e.to_string())?;
    let last = report.metrics.last().unwrap();
    println!(
        "    mask stage: {} epochs in {:.0?}, final train {:.4} val {:.4}",
        report.metrics.len(),
        started.elapsed(),
        last.train_recon,
        last.val_recon
    );
    LayoutModel::from_parts(boxvae, labelmap, corpus.schemas.clone(), paste_orders(corpus)).map_err(|e| e.to_string())
}

fn e2e_suite(corpus: &Corpus, model: &LayoutModel) -> Outcome {
    let train = corpus.indices(Split::Train).len();
    let test = corpus.indices(Split::Test);
    let recon = reconstruction_metrics(&model.boxvae, corpus, &test, 32, Execution::Parallel).map_err(|e| e.to_string())?;
    let requests: Vec<GenerationRequest> = (0..100)
        .map(|s| {
            let i = test[s % test.len()];
            let g = corpus.graph(i).unwrap();
            let parts = (0..g.p_max).filter(|&k| g.is_present(k)).collect();
            GenerationRequest::new(g.category_id, parts, s as u64)
        })
        .collect();
    let gen = generation_metrics(model, &requests, Execution::Parallel).map_err(|e| e.to_string())?;
    check(
        train == 400
            && recon.presence_accuracy >= 0.95
            && recon.mean_iou >= 0.5
            && gen.requested_present_rate >= 0.9
            && gen.containment_rate == 1.0,
        format!(
            "{train} train instances; (a) presence accuracy {:.4} >= 0.95; (b) mean IoU {:.4} >= 0.5; \
             (c) requested parts present {}/{} = {:.3} >= 0.9; (d) containment {:.3} == 1",
            recon.presence_accuracy,
            recon.mean_iou,
            gen.present,
            gen.requested,
            gen.requested_present_rate,
            gen.containment_rate
        ),
    )
}

// ---------------------------------------------------------------- baselines

fn baseline_suite(corpus: &Corpus) -> Outcome {
    let data = TrainData::new(corpus).unwrap();
    let (p, m) = (corpus.schemas.p_max, corpus.schemas.num_categories());
    let cfg = |stage| TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::preset(stage)
    };
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for stage in [Stage::BmVae, Stage::BsLstm, Stage::CgGan] {
        let mut logs = Vec::new();
        let mut finite = true;
        for run in 0..2 {
            let out = dir.path().join(format!("{stage}-{run}"));
            let res = (|| -> partlayout::Result<Vec<f64>> {
                match stage {
                Stage::BmVae => {
                    let model = BmVae::new(BmVaeConfig::new(p, m), 3, DType::F32)?;
                    train_stage(&model, &data, &cfg(stage), Some(&out))
                        .map(|r| r.metrics.iter().flat_map(|r| [r.train_recon, r.val_recon, r.kl]).collect())
                }
                Stage::BsLstm => {
                    let model = BsLstm::new(BsLstmConfig::new(p, m), 3, DType::F32)?;
                    train_stage(&model, &data, &cfg(stage), Some(&out))
                        .map(|r| r.metrics.iter().flat_map(|r| [r.train_recon, r.val_recon]).collect())
                }
                _ => {
                    let model = CgGan::new(CgGanConfig::new(p, m), 3, DType::F32)?;
                    train_cggan(&model, &data, &cfg(stage), Some(&out)).map(|r| {
                        r.metrics
                            .iter()
                            .flat_map(|r| [r.generator, r.discriminator, r.val_generator, r.val_discriminator])
                            .collect()
                    })
                }
                }
            })();
            let v = res.map_err(|e| format!("{stage}: {e}"))?;
            finite &= v.len() >= 2 && v.iter().all(|x| x.is_finite());
            let file = if stage == Stage::CgGan { "cggan-metrics.jsonl".to_string() } else { format!("{stage}-metrics.jsonl") };
            logs.push(std::fs::read_to_string(out.join(file)).map_err(|e| e.to_string())?);
        }
        let same = logs[0] == logs[1] && logs[0].lines().count() == 2;
        ok &= finite && same;
        lines.push(format!("{stage}: finite {finite}, identical logs {same}"));
    }
    check(ok, format!("2 epochs each on {} instances; {}", corpus.len(), lines.join("; ")))
}

// ---------------------------------------------------------------- interactive

fn interactive_suite(model: &LayoutModel) -> Outcome {
    let mut same_hash = 0;
    let mut unions = 0;
    let mut trials = 0;
    let mut adds = 0;
    for seed in 0..12u64 {
        for schema in model.schemas.categories.iter() {
            trials += 1;
            let n = schema.num_parts();
            let parts: Vec<usize> = (0..n).filter(|k| (seed >> k) & 1 == 1 || *k == 0).collect();
            let g = generate_layout(model, &GenerationRequest::new(schema.category_id, parts, seed))
                .map_err(|e| e.to_string())?;
            let again = edit_and_regenerate(model, &g, &[]).map_err(|e| e.to_string())?;
            same_hash += (again.layout.hash() == g.layout.hash()) as usize;
            let before: BTreeSet<usize> = g.parts().into_iter().collect();
            for k in (0..n).filter(|k| !before.contains(k)) {
                adds += 1;
                let inst = g.instance(model.schemas.p_max);
                let added = add_part(model, &inst, k, seed).map_err(|e| e.to_string())?;
                let mut want = before.clone();
                want.insert(k);
                let got: BTreeSet<usize> = added.parts().into_iter().collect();
                unions += (got == want) as usize;
            }
        }
    }
    check(
        same_hash == trials && unions == adds,
        format!("empty edit kept the hash {same_hash}/{trials}; add_part presence = original + new {unions}/{adds}"),
    )
}

fn untrained(corpus: &Corpus) -> LayoutModel {
    let (p, m) = (corpus.schemas.p_max, corpus.schemas.num_categories());
    LayoutModel::from_parts(
        BoxVae::new(BoxVaeConfig::new(p, m), 4, DType::F32).unwrap(),
        LabelMapVae::new(LabelMapConfig::new(p, m), 4, DType::F32).unwrap(),
        corpus.schemas.clone(),
        paste_orders(corpus),
    )
    .unwrap()
}

// ---------------------------------------------------------------- driver

struct Runner {
    filters: Vec<String>,
    failed: usize,
    ran: usize,
}

impl Runner {
    fn wants(&self, name: &str) -> bool {
        self.filters.is_empty() || self.filters.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        if !self.wants(name) {
            return;
        }
        let started = Instant::now();
        let outcome = f();
        let took = started.elapsed();
        self.ran += 1;
        let (ok, detail) = match outcome {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(d) => (false, d),
        };
        if !ok {
            self.failed += 1;
        }
        println!(
            "{} {name} [{:.1?} / budget {:.0?}]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            took,
            budget
        );
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut r = Runner {
        filters,
        failed: 0,
        ran: 0,
    };
    let secs = Duration::from_secs;
    r.run("loss-oracle", secs(10), loss_oracle_suite);
    r.run("gcn", secs(10), gcn_suite);
    let small = synth_generate(
        &SynthConfig {
            instances_per_category: 4,
            ..SynthConfig::default()
        },
        3,
    )
    .unwrap();
    r.run("gradient-check", secs(120), || gradient_suite(&small));
    r.run("anneal-freeze", secs(1), anneal_suite);
    r.run("gumbel", secs(30), gumbel_suite);

    let corpus = e2e_corpus();
    let mut trained = None;
    r.run("synthetic-end-to-end", secs(30 * 60), || {
        let model = train_layout_model(&corpus)?;
        let outcome = e2e_suite(&corpus, &model);
        trained = Some(model);
        outcome
    });
    r.run("baseline-smoke", secs(10 * 60), || baseline_suite(&corpus));
    r.run("interactive-ops", secs(60), || {
        let fallback;
        let model = match &trained {
            Some(m) => m,
            None => {
                fallback = untrained(&corpus);
                &fallback
            }
        };
        interactive_suite(model)
    });
    println!("acceptance: {} run, {} failed", r.ran, r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
