//! End-to-end acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach the console.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teran::alignment::{alignment_matrix, pool, AlignmentMatrix, PoolingKind};
use teran::config::RunConfig;
use teran::data::generate_synthetic;
use teran::encoder::PadMask;
use teran::metrics::{ndcg, recall_at_k, rouge_l, RankedList};
use teran::model::{ModelConfig, RegionSet, TeranParams, TokenSeq};
use teran::numerics::Tensor;
use teran::objective::{triplet_loss, Reduction};
use teran::pipeline::{self, EpochRecord};

type Outcome = Result<String, String>;

fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let cfg = RunConfig::default();
    let summary = pipeline::gradcheck(&cfg, None).map_err(|e| e.to_string())?;
    let worst = summary.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let groups = summary.reports.iter().filter(|r| r.name.starts_with("loss <- ")).count();
    let composite = summary.reports.iter().any(|r| r.name == "loss <- composite.all_parameters");
    let detail = format!(
        "{} checks ({} parameter groups), max rel error {:.2e}, {:.1} s",
        summary.reports.len(),
        groups,
        worst,
        summary.seconds
    );
    if summary.passed() && worst < 1e-4 && summary.seconds < 60.0 && composite {
        Ok(detail)
    } else {
        Err(format!("{detail}\n{}", summary.table()))
    }
}

// ------------------------------------------------------------------ pooling

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> PadMask {
    loop {
        let keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        if keep.iter().any(|&k| k) {
            return PadMask::new(keep).unwrap();
        }
    }
}

fn brute_max_sum(a: &[Vec<f64>], rows: &[bool], cols: &[bool], over_regions: bool) -> f64 {
    let (outer, inner) = if over_regions { (cols, rows) } else { (rows, cols) };
    let mut total = 0.0;
    for (o, _) in outer.iter().enumerate().filter(|(_, &r)| r) {
        let mut best = f64::NEG_INFINITY;
        for (i, _) in inner.iter().enumerate().filter(|(_, &r)| r) {
            let v = if over_regions { a[i][o] } else { a[o][i] };
            if v > best {
                best = v;
            }
        }
        total += best;
    }
    total
}

fn pooling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for case in 0..1000 {
        let (n, m) = (rng.gen_range(1..=10), rng.gen_range(1..=10));
        let (rm, wm) = (random_mask(&mut rng, n), random_mask(&mut rng, m));
        let rows: Vec<bool> = (0..n).map(|i| rm.is_real(i)).collect();
        let cols: Vec<bool> = (0..m).map(|j| wm.is_real(j)).collect();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..m)
                    // Padded cells carry values no real cell can reach.
                    .map(|j| if rows[i] && cols[j] { rng.gen_range(-1.0..1.0) } else { 7.0 })
                    .collect()
            })
            .collect();
        let am = AlignmentMatrix::new(Tensor::from_rows(&a).unwrap(), rm, wm).unwrap();
        let mrsw = brute_max_sum(&a, &rows, &cols, true);
        let mwsr = brute_max_sum(&a, &rows, &cols, false);
        let words = cols.iter().filter(|&&c| c).count() as f64;
        let expected = [
            (PoolingKind::MrSw, mrsw),
            (PoolingKind::MwSr, mwsr),
            (PoolingKind::Symm, mrsw + mwsr),
            (PoolingKind::MrAvgW, mrsw / words),
        ];
        for (kind, want) in expected {
            let got = pool(&am, kind).map_err(|e| e.to_string())?;
            if got != want {
                return Err(format!("case {case} {}: {got} != {want}", kind.name()));
            }
        }
        let symm = pool(&am, PoolingKind::Symm).unwrap();
        let sum = pool(&am, PoolingKind::MrSw).unwrap() + pool(&am, PoolingKind::MwSr).unwrap();
        if symm.to_bits() != sum.to_bits() {
            return Err(format!("case {case}: Symm {symm} is not MrSw + MwSr {sum}"));
        }
    }
    Ok("1000 masked matrices up to 10x10, all four poolings bit-exact, Symm = MrSw + MwSr".into())
}

// --------------------------------------------------------------------- loss

fn brute_loss(s: &[Vec<f64>], margin: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for k in 0..b {
        let mut row = 0.0f64;
        let mut col = 0.0f64;
        for other in (0..b).filter(|&o| o != k) {
            row = row.max(margin + s[k][other] - s[k][k]);
            col = col.max(margin + s[other][k] - s[k][k]);
        }
        total += row + col;
    }
    total
}

fn loss_oracle() -> Outcome {
    let worked = Tensor::from_rows(&[vec![0.5, 0.6], vec![0.4, 0.5]]).unwrap();
    let w: f64 = triplet_loss(&worked, 0.2, Reduction::Sum).map_err(|e| e.to_string())?;
    if (w - 0.8).abs() > 1e-12 {
        return Err(format!("worked 2x2 example gives {w}, expected 0.8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = 0.0f64;
    for case in 0..2000 {
        let b = rng.gen_range(2..=8);
        let mut s: Vec<Vec<f64>> = (0..b).map(|_| (0..b).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let separated = case % 2 == 1;
        if separated {
            // Diagonal beats every negative by at least the margin.
            for k in 0..b {
                let hardest = (0..b)
                    .filter(|&o| o != k)
                    .map(|o| s[k][o].max(s[o][k]))
                    .fold(f64::NEG_INFINITY, f64::max);
                s[k][k] = hardest + 0.2 + rng.gen_range(0.0..0.5);
            }
        }
        let got = triplet_loss(&Tensor::from_rows(&s).unwrap(), 0.2, Reduction::Sum).map_err(|e| e.to_string())?;
        let want = brute_loss(&s, 0.2);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-12 {
            return Err(format!("case {case} ({b}x{b}): {got} vs brute force {want}"));
        }
        if separated && got != 0.0 {
            return Err(format!("case {case}: separated batch has loss {got}"));
        }
    }
    Ok(format!("2x2 worked example = 0.8; 2000 random S up to 8x8, max deviation {worst:.1e}; zero on separated batches"))
}

// ------------------------------------------------------------------ metrics

fn brute_dcg(order: &[usize], rels: &[f64], p: usize) -> f64 {
    order
        .iter()
        .take(p)
        .enumerate()
        .map(|(i, &d)| rels[d] / ((i + 2) as f64).log2())
        .sum()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_ndcg(order: &[usize], rels: &[f64], p: usize) -> f64 {
    let ideal = permutations(rels.len())
        .iter()
        .map(|perm| brute_dcg(perm, rels, p))
        .fold(0.0, f64::max);
    if ideal == 0.0 {
        1.0
    } else {
        brute_dcg(order, rels, p) / ideal
    }
}

fn brute_lcs<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    // Longest subsequence of `a`, by subset enumeration, that embeds in `b`.
    let mut best = 0;
    for bits in 0u32..(1 << a.len()) {
        let picked: Vec<&S> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| &a[i]).collect();
        let mut it = b.iter();
        if picked.iter().all(|x| it.any(|y| y == *x)) {
            best = best.max(picked.len());
        }
    }
    best
}

fn metric_oracles() -> Outcome {
    let ranked = RankedList::from_scores(&[0.1f64, 0.5, 0.9]);
    let v = ndcg(&ranked, &[3.0, 2.0, 0.0], 3).map_err(|e| e.to_string())?;
    if (v - 0.648_040_955_5).abs() > 1e-6 || (v - brute_ndcg(&ranked.order, &[3.0, 2.0, 0.0], 3)).abs() > 1e-6 {
        return Err(format!("{{3,2,0}} worst-first gives {v}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..300 {
        let n = rng.gen_range(1..=7);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64).collect();
        let rels: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
        let p = rng.gen_range(1..=n + 1);
        let r = RankedList::from_scores(&scores);
        let got = ndcg(&r, &rels, p).map_err(|e| e.to_string())?;
        let want = brute_ndcg(&r.order, &rels, p);
        if (got - want).abs() > 1e-6 {
            return Err(format!("ndcg case {case}: {got} vs brute force {want}"));
        }
        let ideal = RankedList::from_scores(&rels);
        let one = ndcg(&ideal, &rels, p).map_err(|e| e.to_string())?;
        if (one - 1.0).abs() > 1e-12 {
            return Err(format!("ndcg case {case}: ideal ranking scores {one}"));
        }
    }
    for case in 0..300 {
        let a: Vec<u8> = (0..rng.gen_range(1..=9)).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u8> = (0..rng.gen_range(1..=9)).map(|_| rng.gen_range(0..4)).collect();
        let l = brute_lcs(&a, &b) as f64;
        let want = if l == 0.0 {
            0.0
        } else {
            let (p, r) = (l / a.len() as f64, l / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        let got = rouge_l(&a, &b).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("rouge_l case {case}: {got} vs independent LCS {want}"));
        }
    }
    for case in 0..200 {
        let (q, d) = (rng.gen_range(1..=8), rng.gen_range(1..=12));
        let lists: Vec<RankedList> = (0..q)
            .map(|_| RankedList::from_scores(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()))
            .collect();
        let truth: Vec<Vec<usize>> = (0..q).map(|_| vec![rng.gen_range(0..d)]).collect();
        let mut last = 0.0;
        for k in 1..=d {
            let r = recall_at_k(&lists, &truth, k).map_err(|e| e.to_string())?;
            if r < last {
                return Err(format!("recall case {case}: R@{k} = {r} < R@{} = {last}", k - 1));
            }
            last = r;
        }
        if last != 1.0 {
            return Err(format!("recall case {case}: R@{d} = {last}"));
        }
    }
    Ok(format!("{{3,2,0}} -> {v:.7}; ndcg, rouge_l match brute force; recall monotone in K; ideal ndcg = 1"))
}

// ---------------------------------------------------------------- invariance

fn invariance_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 12,
        model_dim: 16,
        text_dim: 16,
        common_dim: 16,
        ffn_dim: 32,
        heads: 4,
        geometry_dim: 8,
        visual_layers: 2,
        text_layers: 2,
        final_layers: 2,
        share_final: false,
        dropout: 0.1,
        max_regions: 12,
        vocab_size: 20,
    }
}

fn invariance() -> Outcome {
    let m = invariance_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_pad = 0.0f64;
    let mut worst_perm = 0.0f64;
    for seed in 0..5 {
        let params = TeranParams::<f64>::init(&m, seed).map_err(|e| e.to_string())?;
        for _ in 0..4 {
            let n = rng.gen_range(2..=8);
            let feats: Vec<f64> = (0..n * m.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let boxes: Vec<[f32; 4]> = (0..n)
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..0.5f32), rng.gen_range(0.0..0.5f32));
                    [x, y, x + rng.gen_range(0.05..0.5f32), y + rng.gen_range(0.05..0.5f32)]
                })
                .collect();
            let regions = RegionSet::new(Tensor::new(vec![n, m.feature_dim], feats.clone()).unwrap(), boxes.clone(), PadMask::all(n)).unwrap();
            let len = rng.gen_range(1..=7);
            let ids: Vec<usize> = (1..=len).map(|_| rng.gen_range(1..m.vocab_size)).collect();
            let caption = TokenSeq::new(ids, vec![false; len]).unwrap();

            let v = params.encode_regions(&regions).map_err(|e| e.to_string())?;
            let s = params.encode_words(&caption).map_err(|e| e.to_string())?;
            let padded_v = params.encode_regions(&regions.padded_to(m.max_regions)).map_err(|e| e.to_string())?;
            let padded_s = params.encode_words(&caption.padded_to(len + 3, 0)).map_err(|e| e.to_string())?;

            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(1);
            let pf: Vec<f64> = perm.iter().flat_map(|&i| feats[i * m.feature_dim..(i + 1) * m.feature_dim].to_vec()).collect();
            let pb: Vec<[f32; 4]> = perm.iter().map(|&i| boxes[i]).collect();
            let permuted = RegionSet::new(Tensor::new(vec![n, m.feature_dim], pf).unwrap(), pb, PadMask::all(n)).unwrap();
            let perm_v = params.encode_regions(&permuted).map_err(|e| e.to_string())?;

            for kind in PoolingKind::ALL {
                let base = pool(&alignment_matrix(&v, &s).unwrap(), kind).unwrap();
                let pad = pool(&alignment_matrix(&padded_v, &padded_s).unwrap(), kind).unwrap();
                let per = pool(&alignment_matrix(&perm_v, &s).unwrap(), kind).unwrap();
                worst_pad = worst_pad.max((base - pad).abs());
                worst_perm = worst_perm.max((base - per).abs());
            }
        }
    }
    let detail = format!("max change from padding {worst_pad:.1e}, from region permutation {worst_perm:.1e}");
    if worst_pad <= 1e-6 && worst_perm <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- toy runs

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    base: RunConfig,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut base = RunConfig::load(&toy_config_path()).expect("toy config");
        generate_synthetic(&base.synthetic, &root.join("corpus")).expect("synthetic corpus");
        base.paths.train_manifest = Some(root.join("corpus/manifest.jsonl"));
        base.paths.validation_manifest = None;
        base.paths.eval_manifest = None;
        base.paths.relevance_cache = Some(root.join("relevance.xrel"));
        Self { _dir: dir, root, base }
    }
}

struct RunResult {
    r1_image: f64,
    r1_sentence: f64,
    grounding: f64,
    steps: u64,
    seconds: f64,
    params: usize,
    final_stack: usize,
}

fn run(ws: &Workspace, tag: &str, cfg: &RunConfig) -> Result<RunResult, String> {
    let start = Instant::now();
    let out = ws.root.join(tag);
    let summary = pipeline::train(cfg, &out, None, &mut |_: &EpochRecord| {}).map_err(|e| e.to_string())?;
    let eval = pipeline::evaluate(cfg, &summary.last_checkpoint, None).map_err(|e| e.to_string())?;
    let align = pipeline::align(cfg, &summary.last_checkpoint, &[], &out.join("groundings")).map_err(|e| e.to_string())?;
    let ck = teran::model::checkpoint::load::<f32>(&summary.last_checkpoint, &summary.model).map_err(|e| e.to_string())?;
    Ok(RunResult {
        r1_image: eval.report.image_retrieval.r1,
        r1_sentence: eval.report.sentence_retrieval.r1,
        grounding: align.accuracy().unwrap_or(0.0),
        steps: summary.steps,
        seconds: start.elapsed().as_secs_f64(),
        params: ck.params.count_parameters(),
        final_stack: ck.params.final_stack_size(),
    })
}

fn toy_run(ws: &Workspace) -> Outcome {
    let cfg = &ws.base;
    let s = &cfg.synthetic;
    let setup_ok = s.images == 64
        && s.captions_per_image == 1
        && s.concept_count == 8
        && s.regions_per_image == 8
        && s.words_per_caption == 6
        && cfg.training.pooling == PoolingKind::MrSw
        && cfg.training.margin == 0.2
        && cfg.training.max_steps > 0
        && cfg.training.max_steps <= 300;
    if !setup_ok {
        return Err("toy configuration does not describe the prescribed setup".into());
    }
    let r = run(ws, "toy", cfg)?;
    let detail = format!(
        "{} steps in {:.0} s: R@1 image {:.3} sentence {:.3}, planted grounding {:.3}",
        r.steps, r.seconds, r.r1_image, r.r1_sentence, r.grounding
    );
    if r.steps <= 300 && r.r1_image >= 0.9 && r.r1_sentence >= 0.9 && r.grounding >= 0.8 && r.seconds < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn ablation(ws: &Workspace) -> Outcome {
    let mut lines = Vec::new();
    let mut mean = |kind: PoolingKind, share: bool| -> Result<(f64, f64, Vec<RunResult>), String> {
        let mut runs = Vec::new();
        for seed in ABLATION_SEEDS {
            let mut cfg = ws.base.clone();
            cfg.seed = seed;
            cfg.training.pooling = kind;
            cfg.model.share_final = share;
            runs.push(run(ws, &format!("ablation-{}-{share}-{seed}", kind.name()), &cfg)?);
        }
        let n = runs.len() as f64;
        let img = runs.iter().map(|r| r.r1_image).sum::<f64>() / n;
        let sen = runs.iter().map(|r| r.r1_sentence).sum::<f64>() / n;
        let ground = runs.iter().map(|r| r.grounding).sum::<f64>() / n;
        lines.push(format!(
            "{}{}: mean R@1 image {img:.3} sentence {sen:.3} (grounding {ground:.3})",
            kind.name(),
            if share { " shared" } else { "" }
        ));
        Ok((img, sen, runs))
    };
    let (mrsw_i, mrsw_s, mrsw) = mean(PoolingKind::MrSw, false)?;
    let (mwsr_i, mwsr_s, _) = mean(PoolingKind::MwSr, false)?;
    let (sh_i, sh_s, shared) = mean(PoolingKind::MrSw, true)?;
    let reductions_exact = mrsw
        .iter()
        .zip(&shared)
        .all(|(a, b)| a.params - b.params == a.final_stack && a.final_stack > 0);
    let detail = format!(
        "{}; parameter reduction {} (one final stack = {})",
        lines.join("; "),
        mrsw[0].params - shared[0].params,
        mrsw[0].final_stack
    );
    if mrsw_i >= mwsr_i && mrsw_s >= mwsr_s && sh_i >= 0.8 && sh_s >= 0.8 && reductions_exact {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(ws: &Workspace) -> Outcome {
    let mut cfg = ws.base.clone();
    cfg.training.max_steps = cfg.training.max_steps.min(60);
    let mut outputs = Vec::new();
    for tag in ["det-a", "det-b"] {
        let out = ws.root.join(tag);
        let summary = pipeline::train(&cfg, &out, None, &mut |_: &EpochRecord| {}).map_err(|e| e.to_string())?;
        let report = pipeline::evaluate(&cfg, &summary.best_checkpoint, None).map_err(|e| e.to_string())?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        outputs.push((
            read(&summary.best_checkpoint)?,
            read(&summary.last_checkpoint)?,
            read(&out.join(pipeline::TRAIN_LOG))?,
            serde_json::to_string(&report.report).unwrap(),
            report.scores.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        ));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, a.3 == b.3, a.4 == b.4];
    let detail = format!(
        "checkpoints {}/{}, log {}, report {}, scores {} across two runs",
        ["differ", "identical"][same[0] as usize],
        ["differ", "identical"][same[1] as usize],
        ["differs", "identical"][same[2] as usize],
        ["differs", "identical"][same[3] as usize],
        ["differ", "identical"][same[4] as usize],
    );
    if same.iter().all(|&s| s) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let ws = Workspace::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("pooling oracle", Box::new(pooling_oracle)),
        ("loss oracle", Box::new(loss_oracle)),
        ("metric oracles", Box::new(metric_oracles)),
        ("padding/permutation invariance", Box::new(invariance)),
        ("toy training run", Box::new(|| toy_run(&ws))),
        ("ablation directionality", Box::new(|| ablation(&ws))),
        ("determinism", Box::new(|| determinism(&ws))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
