//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::DateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use halo_core::embedding::{cosine_slices, EmbeddingStore, HashEmbedder};
use halo_core::eval::{
    render_report, run_eval, EvalConfig, EvalRun, ReportFormat, RunOptions, Split,
};
use halo_core::expansion::Query;
use halo_core::gateway::{Gateway, HttpChatBackend, MockBackend, ProviderConfig};
use halo_core::http::{
    CountingTransport, HttpTransport, LiveTransport, ManualClock, ReplayTransport,
};
use halo_core::mmr::{select, MmrConfig, RelevanceMatrix};
use halo_core::pipeline::{Pipeline, PipelineConfig, StageTimings};
use halo_core::prompt::{parse_answer, Label, McqOption, Mode, PromptEngine};
use halo_core::retrieval::{
    ingest_local, LocalIndex, PubmedClient, PubmedConfig, RetrievalError, RetrievalSources,
};
use halo_core::store::KvStore;

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Random instances built from random unit vectors, with values snapped to a
// coarse grid half the time so that score ties actually occur.
fn random_instance(rng: &mut ChaCha8Rng, n_chunks: usize, n_queries: usize) -> RelevanceMatrix {
    let dim = 4;
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                return v;
            }
        }
    };
    let coarse = rng.random_bool(0.5);
    let snap = |x: f64| if coarse { (x * 4.0).round() / 4.0 } else { x };
    let chunks: Vec<Vec<f64>> = (0..n_chunks).map(|_| vec(rng)).collect();
    let queries: Vec<Vec<f64>> = (0..n_queries).map(|_| vec(rng)).collect();
    let rel = chunks
        .iter()
        .map(|c| {
            queries
                .iter()
                .map(|q| snap(cosine_slices(c, q).unwrap()))
                .collect()
        })
        .collect();
    let mut sim = vec![vec![0.0; n_chunks]; n_chunks];
    for i in 0..n_chunks {
        sim[i][i] = 1.0;
        for j in 0..i {
            let s = snap(cosine_slices(&chunks[i], &chunks[j]).unwrap());
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    RelevanceMatrix::new(
        rel,
        sim,
        (0..n_chunks).map(|i| format!("c{i}")).collect(),
        (0..n_queries).map(|i| format!("q{i}")).collect(),
    )
    .unwrap()
}

/// Exhaustive greedy reference: at every step scores all remaining chunks
/// from scratch, then sorts by score descending and index ascending.
fn oracle(m: &RelevanceMatrix, lambda: f64, k: usize) -> Vec<(usize, f64)> {
    let n = m.rel.len();
    let mut picked: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    while picked.len() < k.min(n) {
        let mut cands: Vec<(usize, f64)> = Vec::new();
        for i in 0..n {
            if picked.contains(&i) {
                continue;
            }
            let mut total = 0.0;
            for r in &m.rel[i] {
                total += r;
            }
            let mean = total / m.rel[i].len() as f64;
            let mut red = 0.0;
            for (t, &j) in picked.iter().enumerate() {
                if t == 0 || m.sim[i][j] > red {
                    red = m.sim[i][j];
                }
            }
            cands.push((i, lambda * mean - (1.0 - lambda) * red));
        }
        cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        picked.push(cands[0].0);
        out.push(cands[0]);
    }
    out
}

/// Textbook single-query MMR: relevance to the one query minus the largest
/// similarity to anything already chosen.
fn classical_mmr(rel: &[f64], sim: &[Vec<f64>], lambda: f64, k: usize) -> Vec<(usize, f64)> {
    let mut remaining: Vec<usize> = (0..rel.len()).collect();
    let mut chosen: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    while !remaining.is_empty() && chosen.len() < k {
        let score = |i: usize| {
            let red = chosen
                .iter()
                .map(|&j| sim[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            let red = if chosen.is_empty() { 0.0 } else { red };
            lambda * rel[i] - (1.0 - lambda) * red
        };
        let mut best = remaining[0];
        for &i in &remaining[1..] {
            if score(i) > score(best) {
                best = i;
            }
        }
        out.push((best, score(best)));
        chosen.push(best);
        remaining.retain(|&i| i != best);
    }
    out
}

const LAMBDAS: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 1.0];

fn ac1_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.random_range(1..=8);
        let q = rng.random_range(1..=4);
        let k = rng.random_range(1..=8);
        let lambda = LAMBDAS[rng.random_range(0..LAMBDAS.len())];
        let m = random_instance(&mut rng, n, q);
        let got = select(
            &m,
            &MmrConfig {
                lambda,
                k,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let want = oracle(&m, lambda, k);
        ensure(got.selected.len() == want.len(), || {
            format!("case {case}: length differs")
        })?;
        for (step, ((id, score), (wi, ws))) in
            got.selected.iter().zip(&got.scores).zip(&want).enumerate()
        {
            ensure(
                id == &format!("c{wi}") && (score - ws).abs() <= 1e-12,
                || format!("case {case} step {step}: got {id}/{score}, oracle c{wi}/{ws}"),
            )?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "1000 instances match the brute-force oracle in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn ac2_classical_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..500 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=8);
        let lambda = LAMBDAS[rng.random_range(0..LAMBDAS.len())];
        let m = random_instance(&mut rng, n, 1);
        let rel: Vec<f64> = m.rel.iter().map(|r| r[0]).collect();
        let got = select(
            &m,
            &MmrConfig {
                lambda,
                k,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let want = classical_mmr(&rel, &m.sim, lambda, k);
        let want_ids: Vec<String> = want.iter().map(|(i, _)| format!("c{i}")).collect();
        let want_scores: Vec<f64> = want.iter().map(|(_, s)| *s).collect();
        ensure(
            got.selected == want_ids && got.scores == want_scores,
            || format!("case {case}: {:?} vs {:?}", got.selected, want_ids),
        )?;
    }
    Ok("500 single-query instances match classical MMR exactly".into())
}

fn ac3_lambda_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let n = rng.random_range(1..=8);
        let q = rng.random_range(1..=4);
        let m = random_instance(&mut rng, n, q);
        let got = select(
            &m,
            &MmrConfig {
                lambda: 1.0,
                k: n,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            m.mean_relevance(b)
                .partial_cmp(&m.mean_relevance(a))
                .unwrap()
                .then(a.cmp(&b))
        });
        let want: Vec<String> = order.iter().map(|i| format!("c{i}")).collect();
        ensure(got.selected == want, || {
            format!("case {case}: {:?} vs {want:?}", got.selected)
        })?;
    }
    Ok("200 instances with lambda=1 follow mean relevance order".into())
}

fn ac4_cosine() -> Outcome {
    let hand = cosine_slices(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).map_err(|e| e.to_string())?;
    ensure((hand - 8.0 / 9.0).abs() <= 1e-9, || {
        format!("[1,2,2]·[2,1,2] gave {hand}")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let d = rng.random_range(1..=16);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (Ok(ab), Ok(ba)) = (cosine_slices(&a, &b), cosine_slices(&b, &a)) else {
            return Err(format!("case {case}: cosine failed"));
        };
        ensure(ab == ba, || format!("case {case}: asymmetric {ab} vs {ba}"))?;
        let s = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        let c = cosine_slices(&scaled, &b).unwrap();
        ensure((c - ab).abs() <= 1e-12, || {
            format!("case {case}: scale changed {ab} to {c}")
        })?;
    }
    Ok("hand value 8/9, symmetry and scale invariance hold".into())
}

fn ac5_parser_corpus() -> Outcome {
    let text = std::fs::read_to_string(fixtures().join("parser_corpus.json"))
        .map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let options = |name: &str| -> Vec<McqOption> {
        v["option_sets"][name]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, t)| McqOption {
                label: Label::from_index(i).unwrap(),
                text: t.as_str().unwrap().into(),
            })
            .collect()
    };
    let cases = v["cases"].as_array().unwrap();
    ensure(cases.len() == 40, || {
        format!("corpus has {} strings", cases.len())
    })?;
    let mut hits = 0;
    let mut misses = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let raw = c["text"].as_str().unwrap();
        let expected = c["expected"]
            .as_str()
            .map(|s| Label::new(s.chars().next().unwrap()).unwrap());
        let got = parse_answer(raw, &options(c["options"].as_str().unwrap()));
        if got.choice == expected {
            hits += 1;
        } else {
            misses.push(format!("#{i} {raw:?} gave {:?}", got.choice));
        }
    }
    let verbatim = parse_answer(
        "The correct answer is ``D'' Conduction aphasia",
        &options("five"),
    );
    ensure(verbatim.choice == Label::new('D'), || {
        "verbatim aphasia string not parsed to D".into()
    })?;
    ensure(hits >= 38, || format!("{hits}/40: {}", misses.join("; ")))?;
    Ok(format!("{hits}/40 strings parsed as intended"))
}

fn offline_pipeline() -> Pipeline {
    let f = fixtures();
    let backend = MockBackend::from_file(&f.join("mini20/mock.json")).unwrap();
    let docs = ingest_local(&f.join("corpus.jsonl")).unwrap().documents;
    Pipeline {
        gateway: Arc::new(Gateway::new(
            Arc::new(backend),
            Arc::new(KvStore::in_memory()),
        )),
        sources: Arc::new(RetrievalSources {
            pubmed: None,
            local: Some(LocalIndex::new(docs)),
        }),
        embeddings: Arc::new(EmbeddingStore::new(
            Arc::new(HashEmbedder::default()),
            Arc::new(KvStore::in_memory()),
        )),
        engine: PromptEngine::default(),
        config: PipelineConfig {
            fetched_at: Some(DateTime::UNIX_EPOCH),
            ..Default::default()
        },
    }
}

fn mini20_config(modes: Vec<Mode>) -> EvalConfig {
    EvalConfig {
        dataset_path: fixtures().join("mini20/dataset.jsonl"),
        split: Split::Dev,
        modes,
        model_id: "mock-model".into(),
        ..Default::default()
    }
}

fn comparable(run: &EvalRun) -> (String, String) {
    let report = render_report(&run.report.without_timestamps(), ReportFormat::Json);
    let results: Vec<_> = run
        .results
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.timings = StageTimings::default();
            serde_json::to_string(&r).unwrap()
        })
        .collect();
    (report, results.join("\n"))
}

fn ac6_offline_end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = mini20_config(vec![Mode::Baseline, Mode::Halo]);
    let first =
        run_eval(&cfg, &offline_pipeline(), &RunOptions::default()).map_err(|e| e.to_string())?;
    let second =
        run_eval(&cfg, &offline_pipeline(), &RunOptions::default()).map_err(|e| e.to_string())?;
    let counts = |run: &EvalRun, mode| run.report.mode(mode).map(|m| (m.n_correct, m.n_items));
    ensure(counts(&first, Mode::Baseline) == Some((12, 20)), || {
        format!(
            "baseline {:?}, expected 12/20",
            counts(&first, Mode::Baseline)
        )
    })?;
    ensure(counts(&first, Mode::Halo) == Some((18, 20)), || {
        format!("halo {:?}, expected 18/20", counts(&first, Mode::Halo))
    })?;
    let base = first.report.mode(Mode::Baseline).unwrap();
    ensure(
        base.accuracy == 0.6 && base.parse_failures == 1 && base.errors == 0,
        || format!("baseline summary {base:?}"),
    )?;
    let halo = first.report.mode(Mode::Halo).unwrap();
    ensure(halo.accuracy == 0.9 && halo.degraded_contexts == 0, || {
        format!("halo summary {halo:?}")
    })?;
    ensure(
        first
            .results
            .iter()
            .filter(|r| r.mode == Mode::Halo)
            .all(|r| !r.selected_chunks.is_empty()),
        || "a halo item was answered without selected chunks".into(),
    )?;
    ensure(comparable(&first) == comparable(&second), || {
        "runs differ beyond timestamps".into()
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "baseline 12/20 = 0.6, halo 18/20 = 0.9, two runs identical, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn ac7_statelessness() -> Outcome {
    let cfg = mini20_config(vec![Mode::Halo]);
    let pipeline = offline_pipeline();
    let run = run_eval(&cfg, &pipeline, &RunOptions::default()).map_err(|e| e.to_string())?;
    let log = pipeline.gateway.call_log();
    ensure(log.len() == 40, || {
        format!("{} completion calls, expected 40", log.len())
    })?;
    let expansions = log
        .iter()
        .filter(|c| c.user_text.contains("Original question: "))
        .count();
    let answers = log
        .iter()
        .filter(|c| c.user_text.contains("\nQUESTION:\n"))
        .count();
    ensure(expansions == 20 && answers == 20, || {
        format!("{expansions} expansion + {answers} answer calls")
    })?;
    let questions: Vec<String> = halo_core::eval::load_dataset(&cfg.dataset_path, cfg.split)
        .unwrap()
        .items
        .into_iter()
        .map(|i| i.question)
        .collect();
    for call in &log {
        let mentioned = questions
            .iter()
            .filter(|q| call.user_text.contains(q.as_str()))
            .count();
        ensure(mentioned == 1, || {
            format!("a call mentions {mentioned} dataset questions")
        })?;
        ensure(call.user_text.matches("QUESTION:").count() <= 1, || {
            "a call carries more than one question".into()
        })?;
    }
    ensure(run.results.len() == 20, || "missing results".into())?;
    Ok("20 expansion + 20 answer calls, each carrying exactly one item".into())
}

fn ac8_report_integrity() -> Outcome {
    let run = run_eval(
        &mini20_config(vec![Mode::Baseline, Mode::Halo]),
        &offline_pipeline(),
        &RunOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let report = &run.report;
    report.check_integrity()?;
    let back = halo_core::eval::parse_report_json(&render_report(report, ReportFormat::Json))
        .map_err(|e| e.to_string())?;
    ensure(&back == report, || {
        "JSON round trip changed the report".into()
    })?;
    for m in &report.modes {
        let n: usize = m.subjects.iter().map(|r| r.n_items).sum();
        ensure(n == report.item_count, || {
            format!("{}: subject rows sum to {n}", m.mode)
        })?;
    }
    let md = render_report(report, ReportFormat::Markdown);
    ensure(
        md.contains("| Model | w/o HALO Acc. | w/ HALO Acc. |"),
        || "markdown header".into(),
    )?;
    ensure(
        md.contains("| mock-model | 0.60 (12/20) | 0.90 (18/20) |"),
        || format!("markdown body:\n{md}"),
    )?;
    let csv = render_report(report, ReportFormat::Csv);
    let rows = csv.lines().count() - 1;
    ensure(rows == 2 * (4 + 1), || format!("csv has {rows} rows"))?;
    Ok("JSON round-trips, subject counts sum to 20, markdown and csv layouts hold".into())
}

fn ac9_pubmed_replay() -> Outcome {
    let f = fixtures().join("pubmed");
    let cfg = PubmedConfig {
        api_key_env_var: "HALO_ACCEPTANCE_UNSET_KEY".into(),
        ..Default::default()
    };
    let replay: Arc<dyn HttpTransport> =
        Arc::new(ReplayTransport::from_file(&f.join("replay.json")).map_err(|e| e.to_string())?);
    let client =
        PubmedClient::with_clock(cfg.clone(), replay.clone(), Arc::new(ManualClock::new()));
    let q = Query::new("q", "What are the characteristics of Remifentanyl?").unwrap();
    let pmids = client.search(&q, 5).map_err(|e| e.to_string())?;
    ensure(pmids == ["39000101", "39000102", "39000103"], || {
        format!("pmids {pmids:?}")
    })?;
    let out = client
        .fetch(&pmids, DateTime::UNIX_EPOCH)
        .map_err(|e| e.to_string())?;
    let ids: Vec<&str> = out.documents.iter().map(|d| d.doc_id.as_str()).collect();
    ensure(ids == ["PMID:39000101", "PMID:39000103"], || {
        format!("documents {ids:?}")
    })?;
    let d = &out.documents[0];
    ensure(
        d.title
            == "Context-sensitive half-time of remifentanil & other opioids: a synthetic review.",
        || format!("title {:?}", d.title),
    )?;
    let body = "BACKGROUND: Remifentanil is an ultra-short-acting mu-opioid agonist.\nRESULTS: Its context-sensitive half-time stayed <5 minutes regardless of infusion duration, because nonspecific esterases hydrolyse it.";
    ensure(d.body == body, || format!("body {:?}", d.body))?;
    ensure(
        out.warnings.len() == 1 && out.warnings[0].contains("39000102"),
        || format!("warnings {:?}", out.warnings),
    )?;
    let empty = client
        .search(&Query::new("q2", "unrelated topic").unwrap(), 5)
        .map_err(|e| e.to_string())?;
    ensure(empty.is_empty(), || {
        "unmatched search should return no PMIDs".into()
    })?;

    let bad = Arc::new(
        ReplayTransport::from_file(&f.join("replay_malformed.json")).map_err(|e| e.to_string())?,
    );
    let bad_client = PubmedClient::with_clock(cfg.clone(), bad, Arc::new(ManualClock::new()));
    match bad_client.fetch(&pmids, DateTime::UNIX_EPOCH) {
        Err(RetrievalError::MalformedResponse(_)) => {}
        other => return Err(format!("malformed XML gave {other:?}")),
    }

    let clock = Arc::new(ManualClock::new());
    let counting = Arc::new(CountingTransport::new(replay, clock.clone()));
    let limited = PubmedClient::with_clock(cfg, counting.clone(), clock);
    for _ in 0..12 {
        limited.search(&q, 5).map_err(|e| e.to_string())?;
    }
    let times = counting.dispatch_times();
    ensure(times.len() == 12, || format!("{} dispatches", times.len()))?;
    for (i, t) in times.iter().enumerate() {
        let in_window = times[i..]
            .iter()
            .filter(|u| **u < *t + Duration::from_secs(1))
            .count();
        ensure(in_window <= 3, || {
            format!("{in_window} dispatches within one second of {t:?}")
        })?;
    }
    Ok(
        "golden PMIDs and documents, malformed XML rejected, at most 3 dispatches per second"
            .into(),
    )
}

fn ac10_live() -> Option<Outcome> {
    let dataset = std::env::var("HALO_LIVE_DATASET").ok()?;
    std::env::var("OPENAI_API_KEY").ok()?;
    let run = || -> Outcome {
        let transport: Arc<dyn HttpTransport> = Arc::new(LiveTransport::default());
        let backend = HttpChatBackend::new(ProviderConfig::default(), transport.clone());
        let pipeline = Pipeline {
            gateway: Arc::new(Gateway::new(
                Arc::new(backend),
                Arc::new(KvStore::in_memory()),
            )),
            sources: Arc::new(RetrievalSources {
                pubmed: Some(PubmedClient::new(PubmedConfig::default(), transport)),
                local: None,
            }),
            embeddings: Arc::new(EmbeddingStore::new(
                Arc::new(HashEmbedder::default()),
                Arc::new(KvStore::in_memory()),
            )),
            engine: PromptEngine::default(),
            config: PipelineConfig::default(),
        };
        let cfg = EvalConfig {
            dataset_path: dataset.into(),
            sample_size: Some(100),
            seed: 7,
            ..Default::default()
        };
        let r = run_eval(&cfg, &pipeline, &RunOptions::default()).map_err(|e| e.to_string())?;
        let base = r.report.mode(Mode::Baseline).unwrap().accuracy;
        let halo = r.report.mode(Mode::Halo).unwrap().accuracy;
        let delta = halo - base;
        ensure(delta >= 0.0, || {
            format!("halo {halo:.2} below baseline {base:.2}")
        })?;
        let note = if delta >= 0.05 {
            "consistent with the published gains"
        } else {
            "small gain"
        };
        Ok(format!("baseline {base:.2}, halo {halo:.2} ({note})"))
    };
    Some(run())
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("AC1", "MMR oracle equivalence", ac1_oracle_equivalence),
        ("AC2", "classical MMR reduction", ac2_classical_reduction),
        ("AC3", "lambda=1 degenerate case", ac3_lambda_one),
        ("AC4", "cosine properties", ac4_cosine),
        ("AC5", "answer parser corpus", ac5_parser_corpus),
        ("AC6", "offline end-to-end", ac6_offline_end_to_end),
        ("AC7", "statelessness audit", ac7_statelessness),
        ("AC8", "report integrity", ac8_report_integrity),
        ("AC9", "PubMed replay and rate limit", ac9_pubmed_replay),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("{id} PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("{id} FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("{id} FAIL {name}: panicked");
            }
        }
    }
    match ac10_live() {
        None => println!(
            "AC10 SKIP live sampled check: set HALO_LIVE_DATASET and OPENAI_API_KEY to run"
        ),
        Some(Ok(detail)) => println!("AC10 PASS live sampled check: {detail}"),
        Some(Err(why)) => println!("AC10 FAIL live sampled check (optional, not counted): {why}"),
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
