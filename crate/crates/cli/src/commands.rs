use std::collections::BTreeSet;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use gazekit_core::audio::MfccConfig;
use gazekit_core::data::{
    coco_to_vgs, load_clip, read_vgs, save_clip, split_frames, synth_scene, vat_to_vgs, vgs_to_coco, vgs_to_vat,
    vgs_to_voc, voc_to_vgs, write_vgs, ClipData, CocoDocument, FrameKey, SynthConfig, VgsDataset, VocDocument,
};
use gazekit_core::detector::{train_detector as fit_detector, Detector, DetectorSample, DetectorTrainConfig};
use gazekit_core::eval::{
    ablation_report, evaluate, read_detections, read_ground_truth, Detection, EvalRun, GroundTruth,
};
use gazekit_core::gradsuite::{gradient_suite, SUITE_KINDS};
use gazekit_core::matcher::{read_matches, train_matcher as fit_matcher, MatcherSample, MatcherTrainConfig};
use gazekit_core::nn::SgdConfig;
use gazekit_core::pipeline::{
    detector_sample, frame_persons, gaze_ground_truth, matcher_sample, records_by_frame, run_pipeline, PipelineConfig,
    DETECTIONS_FILE, MATCHES_FILE,
};
use gazekit_core::speaker::{build_sync_corpus, train_sync as fit_sync, SyncClip, SyncTrainConfig};
use gazekit_core::write_atomic;
use serde_json::json;

use crate::{
    ConvertArgs, EvalArgs, Format, GradcheckArgs, InferArgs, Report, SgdArgs, SplitArgs, SynthArgs, TrainDetectorArgs,
    TrainMatcherArgs, TrainSyncArgs,
};

type Res<T> = Result<T, Box<dyn Error>>;

fn ok(text: String, json: serde_json::Value) -> Res<Report> {
    Ok(Report { text, json, failed: false })
}

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write(path: &Path, text: &str) -> Res<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    write_atomic(path, text.as_bytes()).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn apply_sgd(base: SgdConfig, a: &SgdArgs) -> SgdConfig {
    SgdConfig {
        learning_rate: a.lr.unwrap_or(base.learning_rate),
        momentum: a.momentum.unwrap_or(base.momentum),
        epochs: a.epochs.unwrap_or(base.epochs),
        batch_size: a.batch.unwrap_or(base.batch_size),
        seed: a.seed.unwrap_or(base.seed),
    }
}

const ANNOTATIONS: &str = "annotations.vgs.jsonl";

/// `dir` itself when it is a clip, otherwise its clip subdirectories in name order.
fn clip_dirs(dir: &Path) -> Res<Vec<PathBuf>> {
    if dir.join(ANNOTATIONS).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ANNOTATIONS).is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(format!("{}: no clip directories found", dir.display()).into());
    }
    Ok(out)
}

fn losses(v: &[f64]) -> String {
    v.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>().join(" ")
}

pub fn synth(a: &SynthArgs) -> Res<Report> {
    let mut cfg = SynthConfig { out_of_frame_voice: a.out_of_frame_voice, ..SynthConfig::default() };
    if let Some(f) = a.frames {
        cfg.min_frames = f;
        cfg.max_frames = f;
    }
    cfg.min_persons = a.min_persons.unwrap_or(cfg.min_persons);
    cfg.max_persons = a.max_persons.unwrap_or(cfg.max_persons).max(cfg.min_persons);
    if cfg.min_persons < 2 || cfg.min_frames < 1 {
        return Err("synthetic clips need at least two persons and one frame".into());
    }
    let mut paths = Vec::new();
    for i in 0..a.count {
        let clip = synth_scene(a.seed + i, &cfg);
        let dir = a.out.join(&clip.header.video);
        save_clip(&clip, &dir)?;
        paths.push(dir.display().to_string());
    }
    ok(format!("wrote {} clips to {}\n", paths.len(), a.out.display()), json!({ "clips": paths }))
}

fn read_voc_dir(dir: &Path) -> Res<Vec<VocDocument>> {
    let mut docs = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| format!("{}: {e}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "xml") {
                let rel = p.strip_prefix(dir)?.to_string_lossy().replace('\\', "/");
                docs.push(VocDocument { path: rel, xml: read(&p)? });
            }
        }
    }
    docs.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(docs)
}

pub fn convert(a: &ConvertArgs) -> Res<Report> {
    let mut lossy = false;
    let ds: VgsDataset = match a.from {
        Format::Vgs => read_vgs(&read(&a.input)?)?,
        Format::Coco => coco_to_vgs(&serde_json::from_str::<CocoDocument>(&read(&a.input)?)?)?,
        Format::Voc => voc_to_vgs(&read_voc_dir(&a.input)?)?,
        Format::Vat => {
            let headers = match &a.headers {
                Some(h) => read_vgs(&read(h)?)?.videos,
                None => Vec::new(),
            };
            let import = vat_to_vgs(&read(&a.input)?, &headers)?;
            lossy = import.lossy;
            import.dataset
        }
    };
    match a.to {
        Format::Vgs => write(&a.output, &write_vgs(&ds)?)?,
        Format::Coco => write(&a.output, &(serde_json::to_string_pretty(&vgs_to_coco(&ds)?)? + "\n"))?,
        Format::Voc => {
            for doc in vgs_to_voc(&ds)? {
                write(&a.output.join(&doc.path), &doc.xml)?;
            }
        }
        Format::Vat => {
            lossy = true;
            write(&a.output, &vgs_to_vat(&ds)?)?
        }
    }
    ok(
        format!("converted {} records to {}\n", ds.records.len(), a.output.display()),
        json!({ "records": ds.records.len(), "videos": ds.videos.len(), "output": a.output, "lossy": lossy }),
    )
}

pub fn split(a: &SplitArgs) -> Res<Report> {
    let ds = read_vgs(&read(&a.input)?)?;
    let s = split_frames(&ds.frame_keys(), a.seed)?;
    write(&a.output, &(serde_json::to_string_pretty(&s)? + "\n"))?;
    ok(
        format!("train {} / test {} frames, seed {}\n", s.train.len(), s.test.len(), s.seed),
        json!({ "train": s.train.len(), "test": s.test.len(), "seed": s.seed, "manifest": a.output }),
    )
}

pub fn train_sync(a: &TrainSyncArgs) -> Res<Report> {
    let clips: Vec<ClipData> = clip_dirs(&a.clips)?.iter().map(|d| load_clip(d)).collect::<Result<_, _>>()?;
    let views: Vec<SyncClip> = clips.iter().map(SyncClip::from_clip_data).collect::<Result<_, _>>()?;
    let base = SyncTrainConfig::default();
    let cfg = SyncTrainConfig { sgd: apply_sgd(base.sgd, &a.sgd), margin: a.margin.unwrap_or(base.margin), ..base };
    let corpus = build_sync_corpus(&views, &MfccConfig::default(), a.stride, cfg.sgd.seed)?;
    drop(views);
    drop(clips);
    let (matched, mismatched) = corpus.counts();
    let t = fit_sync(&corpus, &cfg)?;
    t.model.save(&a.out, cfg.sgd.seed, Some(cfg.sgd))?;
    ok(
        format!(
            "pairs {matched} matched / {mismatched} mismatched\nlosses {}\ntau {:.4} validation accuracy {:.4}\nsaved {}\n",
            losses(&t.epoch_losses),
            t.model.tau,
            t.validation_accuracy,
            a.out.display()
        ),
        json!({
            "matched_pairs": matched, "mismatched_pairs": mismatched, "epoch_losses": t.epoch_losses,
            "tau": t.model.tau, "mean_matched": t.mean_matched, "mean_mismatched": t.mean_mismatched,
            "validation_accuracy": t.validation_accuracy, "checkpoint": a.out,
        }),
    )
}

/// Sampled frames of every clip: image index, persons with annotated roles, gaze boxes.
fn for_each_frame(dir: &Path, stride: usize, mut f: impl FnMut(&ClipData, u32) -> Res<()>) -> Res<usize> {
    let mut n = 0;
    for d in clip_dirs(dir)? {
        let clip = load_clip(&d)?;
        for k in (0..clip.frames.len()).step_by(stride.max(1)) {
            f(&clip, k as u32)?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn train_detector(a: &TrainDetectorArgs) -> Res<Report> {
    let mut samples: Vec<DetectorSample> = Vec::new();
    for_each_frame(&a.clips, a.frame_stride, |clip, f| {
        let by_frame = records_by_frame(&clip.annotations, &clip.header.video);
        let recs = by_frame.get(&f).cloned().unwrap_or_default();
        let gaze: Vec<_> = recs.iter().map(|r| r.gaze).collect();
        samples.push(detector_sample(&clip.frames[f as usize], &frame_persons(&recs, None), &gaze));
        Ok(())
    })?;
    let base = DetectorTrainConfig::default();
    let cfg = DetectorTrainConfig { sgd: apply_sgd(base.sgd, &a.sgd), zero_identity: a.no_audio, ..base };
    let t = fit_detector(&samples, &cfg)?;
    t.detector.save(&a.out, cfg.sgd.seed, Some(cfg.sgd))?;
    ok(
        format!("frames {}\nlosses {}\nsaved {}\n", samples.len(), losses(&t.epoch_losses), a.out.display()),
        json!({ "frames": samples.len(), "epoch_losses": t.epoch_losses, "no_audio": a.no_audio, "checkpoint": a.out }),
    )
}

pub fn train_matcher(a: &TrainMatcherArgs) -> Res<Report> {
    let det = Detector::load(&a.detector)?;
    let mut samples: Vec<MatcherSample> = Vec::new();
    for_each_frame(&a.clips, a.frame_stride, |clip, f| {
        let by_frame = records_by_frame(&clip.annotations, &clip.header.video);
        let recs = by_frame.get(&f).cloned().unwrap_or_default();
        let persons = frame_persons(&recs, None);
        let targets: Vec<_> =
            persons.iter().map(|p| recs.iter().find(|r| r.person_id == p.person_id).map(|r| r.gaze)).collect();
        samples.push(matcher_sample(&det, &clip.frames[f as usize], &persons, &targets, a.no_audio)?);
        Ok(())
    })?;
    let base = MatcherTrainConfig::default();
    let cfg = MatcherTrainConfig { sgd: apply_sgd(base.sgd, &a.sgd) };
    let t = fit_matcher(&samples, det.config.feature_channels(), &cfg)?;
    t.matcher.save(&a.out, cfg.sgd.seed, Some(cfg.sgd))?;
    ok(
        format!("frames {}\nlosses {}\nsaved {}\n", samples.len(), losses(&t.epoch_losses), a.out.display()),
        json!({ "frames": samples.len(), "epoch_losses": t.epoch_losses, "no_audio": a.no_audio, "checkpoint": a.out }),
    )
}

pub fn infer(a: &InferArgs) -> Res<Report> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
        if let Some(v) = v {
            *slot = v.clone();
        }
    };
    set(&mut cfg.input, &a.input);
    set(&mut cfg.output, &a.output);
    set(&mut cfg.sync_checkpoint, &a.sync);
    set(&mut cfg.detector_checkpoint, &a.detector);
    set(&mut cfg.matcher_checkpoint, &a.matcher);
    cfg.tau = a.tau.or(cfg.tau);
    cfg.no_audio |= a.no_audio;
    cfg.overlays &= !a.no_overlays;
    let out = run_pipeline(&cfg)?;
    cfg.save(&cfg.output.join("pipeline.conf"))?;
    let targets = out.matches.iter().filter(|m| m.target_box.is_some()).count();
    ok(
        format!(
            "video {}: {} frames, {} subjects matched, {} with a target\noutputs in {}\n",
            out.video,
            out.frames,
            out.matches.len(),
            targets,
            cfg.output.display()
        ),
        json!({
            "video": out.video, "frames": out.frames, "matches": out.matches.len(), "targets": targets,
            "no_audio": cfg.no_audio, "output": cfg.output,
        }),
    )
}

fn load_ground_truth(path: &Path) -> Res<Vec<GroundTruth>> {
    let file = if path.is_dir() { path.join(ANNOTATIONS) } else { path.to_path_buf() };
    let text = read(&file)?;
    match read_ground_truth(&text) {
        Ok(g) => Ok(g),
        Err(_) => Ok(gaze_ground_truth(&read_vgs(&text)?)),
    }
}

/// Detections and the frames the run covered.
fn load_run(path: &Path) -> Res<EvalRun> {
    let name = path.display().to_string();
    if path.is_dir() {
        let detections = read_detections(&read(&path.join(DETECTIONS_FILE))?)?;
        let frames: BTreeSet<FrameKey> = read_matches(&read(&path.join(MATCHES_FILE))?)?
            .into_iter()
            .map(|m| FrameKey::new(m.video, m.frame))
            .collect();
        return Ok(EvalRun { name, frames: frames.into_iter().collect(), detections });
    }
    let detections: Vec<Detection> = read_detections(&read(path)?)?;
    let frames: BTreeSet<FrameKey> = detections.iter().map(|d| FrameKey::new(d.video.clone(), d.frame)).collect();
    Ok(EvalRun { name, frames: frames.into_iter().collect(), detections })
}

pub fn eval(a: &EvalArgs) -> Res<Report> {
    let gts = load_ground_truth(&a.ground_truth)?;
    let run = load_run(&a.detections)?;
    match &a.baseline {
        None => {
            let c = evaluate(&run.detections, &gts, a.gate)?;
            ok(
                format!("AP {:.4} over {} positives ({} detections)\n", c.ap, c.m, run.detections.len()),
                serde_json::to_value(&c)?,
            )
        }
        Some(b) => {
            let base = load_run(b)?;
            let r = ablation_report(&run, &base, &gts, a.gate)?;
            ok(r.to_text(), serde_json::to_value(&r)?)
        }
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> Res<Report> {
    let cases = gradient_suite(a.cases, a.seed, a.tolerance)?;
    let mut text = String::new();
    for kind in SUITE_KINDS {
        let of: Vec<_> = cases.iter().filter(|c| c.kind == kind).collect();
        if of.is_empty() {
            continue;
        }
        let passed = of.iter().filter(|c| c.passed).count();
        let worst = of.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        text.push_str(&format!("{kind:<12} {passed}/{} passed, max rel error {worst:.2e}\n", of.len()));
    }
    let failed = cases.iter().any(|c| !c.passed);
    text.push_str(&format!(
        "{} cases at tolerance {:e}: {}\n",
        cases.len(),
        a.tolerance,
        if failed { "FAIL" } else { "ok" }
    ));
    Ok(Report { text, json: json!({ "tolerance": a.tolerance, "cases": cases, "passed": !failed }), failed })
}
