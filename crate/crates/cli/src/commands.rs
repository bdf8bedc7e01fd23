use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;
use talon::decode::{decode_proposals, DecodeOpts};
use talon::ensemble::{
    classify_ensemble, ensemble_bundles, fit_adaptive_weights, fuse_proposal_sets, search_bundle_weights,
    BundleSearch, LogitsBatch, ModelWeights,
};
use talon::eval::{default_tious, topk_accuracy, EvalReport};
use talon::io::{self, BundleKind};
use talon::nms::{soft_nms, SoftNmsOpts};
use talon::refine::{
    cascade_refine, fit_cascade, CascadeConfig, Refiner, RefinerParams, RoiConfig, ScoreFusion, TrainingVideo,
};
use talon::synth::{gen_annotations, gen_bundle, gen_features, gen_logits, oracle_refiner, SynthConfig};
use talon::targets::{bm_label_map, boundary_labels};
use talon::{AnnotationDb, Error, FeatureSequence, GridSpec, ScoreBundle, Subset, VideoProposals, VideoRecord};

use crate::{
    AnnotationArgs, ClassifyArgs, Command, DecodeArgs, EnsembleArgs, EvalArgs, FusionArg, GenLabelsArgs, NmsArgs,
    NmsOptArgs, RefineArgs, SynthArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::GenLabels(a) => gen_labels(a),
        Command::Decode(a) => decode(a),
        Command::Nms(a) => nms(a),
        Command::Refine(a) => refine(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Classify(a) => classify(a),
        Command::Eval(a) => eval(a),
    }
}

fn flag(name: &str, path: &Path) -> String {
    format!("{name} {}", path.display())
}

fn load_db(args: &AnnotationArgs) -> Result<AnnotationDb> {
    AnnotationDb::load(&args.annotations, args.label_index.as_deref()).with_context(|| {
        match &args.label_index {
            Some(l) => format!("{} with {}", flag("--annotations", &args.annotations), flag("--label-index", l)),
            None => flag("--annotations", &args.annotations),
        }
    })
}

/// Reads a proposal file; `-` reads stdin.
fn load_proposals(name: &str, path: &Path) -> Result<VideoProposals> {
    let sets = if path == Path::new("-") {
        io::parse_proposals(std::io::stdin().lock())
    } else {
        io::read_proposals(path)
    };
    sets.with_context(|| flag(name, path))
}

fn load_bundles(name: &str, path: &Path) -> Result<BTreeMap<String, ScoreBundle>> {
    io::read_bundles(path).with_context(|| flag(name, path))
}

fn load_json<T: serde::de::DeserializeOwned>(name: &str, path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    value.with_context(|| flag(name, path))
}

fn nms_opts(a: &NmsOptArgs) -> SoftNmsOpts {
    SoftNmsOpts {
        sigma: a.sigma,
        min_score: a.nms_min_score,
        top_k: a.top_k,
    }
}

fn record<'a>(db: &'a AnnotationDb, id: &str, source: &str) -> Result<&'a VideoRecord> {
    db.get(id)
        .ok_or_else(|| Error::Validation(format!("video {id} from {source} has no record in --annotations")).into())
}

fn write_to(name: &str, path: &Path, bytes: &[u8]) -> Result<()> {
    io::write_output(path, bytes).with_context(|| flag(name, path))
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_videos: a.videos,
        n_classes: a.classes,
        duration_range: (a.min_duration, a.max_duration),
        actions_range: (a.min_actions, a.max_actions),
        boundary_noise: a.boundary_noise,
        map_noise: a.map_noise,
        feature_channels: a.channels,
        feature_noise: a.feature_noise,
        feature_signal: a.feature_signal,
        snap_d: Some(a.d),
        train_fraction: a.train_fraction,
    };
    let db = gen_annotations(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Error::Io { path: a.out_dir.clone(), source: e })
        .with_context(|| flag("--out-dir", &a.out_dir))?;
    let bundle_seed = a.bundle_seed.unwrap_or(a.seed);
    let videos: Vec<&VideoRecord> = db.videos().collect();
    let generated = videos
        .par_iter()
        .map(|v| {
            let spec = GridSpec::new(a.d, v.duration())?;
            let bundle = gen_bundle(v, &spec, a.map_noise, a.boundary_noise, bundle_seed)?;
            Ok((v.video_id.clone(), bundle, gen_features(v, &cfg)?))
        })
        .collect::<talon::Result<Vec<_>>>()?;
    let mut bundles = BTreeMap::new();
    let mut features = BTreeMap::new();
    for (id, b, f) in generated {
        bundles.insert(id.clone(), b);
        features.insert(id, f);
    }
    let out = |name: &str| a.out_dir.join(name);
    db.save(&out("annotations.json"))?;
    db.save_label_index(&out("labels.json"))?;
    io::write_bundles(&out("bundles.tfnb"), &bundles)?;
    io::write_features(&out("features.tfnf"), &features)?;
    if !a.logit_margins.is_empty() {
        let (lb, labels) = gen_logits(a.seed, a.logit_samples, a.classes, &a.logit_margins)?;
        write_to("--out-dir", &out("logits.json"), lb.to_json().as_bytes())?;
        write_to("--out-dir", &out("logit_labels.json"), serde_json::to_string(&labels)?.as_bytes())?;
    }
    eprintln!(
        "wrote {} videos, {} instances, {} classes to {}",
        db.len(),
        db.n_instances(),
        db.n_classes(),
        a.out_dir.display()
    );
    Ok(())
}

fn gen_labels(a: GenLabelsArgs) -> Result<()> {
    let db = load_db(&a.db)?;
    let videos: Vec<&VideoRecord> = db.videos().collect();
    let f32s = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    let bundles = videos
        .par_iter()
        .map(|v| {
            let spec = GridSpec::new(a.d, v.duration())?;
            let segs = v.segments();
            let labels = boundary_labels(&segs, &spec, a.expand_ratio)?;
            let map = f32s(bm_label_map(&segs, &spec).into_values());
            let bundle = ScoreBundle::new(a.d, f32s(labels.start), f32s(labels.end), map.clone(), map)?;
            Ok((v.video_id.clone(), bundle))
        })
        .collect::<talon::Result<BTreeMap<_, _>>>()?;
    io::write_bundles_tagged(&a.out, &bundles, BundleKind::Label).with_context(|| flag("--out", &a.out))
}

fn decode(a: DecodeArgs) -> Result<()> {
    let db = load_db(&a.db)?;
    let bundles = load_bundles("--bundles", &a.bundles)?;
    let opts = DecodeOpts {
        max_candidates: a.max_candidates,
        min_score: a.min_score,
        peaks_only: a.peaks_only,
        gamma: a.gamma,
    };
    let nms = a.nms.then(|| nms_opts(&a.nms_opts));
    let source = flag("--bundles", &a.bundles);
    let entries: Vec<(&String, &ScoreBundle)> = bundles.iter().collect();
    let out = entries
        .par_iter()
        .map(|(id, b)| {
            let v = record(&db, id, &source)?;
            let mut ps = decode_proposals(b, v, &opts)?;
            if let Some(o) = &nms {
                ps = soft_nms(&ps, o)?;
            }
            Ok(((*id).clone(), ps))
        })
        .collect::<Result<VideoProposals>>()?;
    io::write_proposals(&a.out, &out).with_context(|| flag("--out", &a.out))
}

fn nms(a: NmsArgs) -> Result<()> {
    let sets = load_proposals("--proposals", &a.proposals)?;
    let opts = nms_opts(&a.nms_opts);
    let out = sets
        .par_iter()
        .map(|(id, ps)| Ok((id.clone(), soft_nms(ps, &opts)?)))
        .collect::<talon::Result<VideoProposals>>()?;
    io::write_proposals(&a.out, &out).with_context(|| flag("--out", &a.out))
}

fn refine(a: RefineArgs) -> Result<()> {
    if a.stages != a.thresholds.len() {
        return Err(Error::Validation(format!(
            "--stages {} does not match the {} values of --thresholds",
            a.stages,
            a.thresholds.len()
        ))
        .into());
    }
    let db = load_db(&a.db)?;
    let mut sets = load_proposals("--proposals", &a.proposals)?;
    let source = flag("--proposals", &a.proposals);
    for id in sets.keys() {
        record(&db, id, &source)?;
    }
    if let Some(subset) = a.subset {
        sets.retain(|id, _| db.get(id).is_some_and(|v| v.subset == subset));
    }
    if !a.no_pre_nms {
        let opts = nms_opts(&a.nms_opts);
        sets = sets
            .into_par_iter()
            .map(|(id, ps)| Ok((id, soft_nms(&ps, &opts)?)))
            .collect::<talon::Result<VideoProposals>>()?;
    }

    let features = match (&a.features, a.oracle) {
        (Some(p), _) => io::read_features(p).with_context(|| flag("--features", p))?,
        (None, Some(_)) => BTreeMap::new(),
        (None, None) => {
            return Err(Error::Validation("--features is required unless --oracle is given".into()).into())
        }
    };
    let empty = FeatureSequence::zeros(1, 2);
    let feats_for = |id: &str| -> Result<&FeatureSequence> {
        match (features.get(id), a.oracle) {
            (Some(f), _) => Ok(f),
            (None, Some(_)) => Ok(&empty),
            (None, None) => Err(Error::Validation(format!(
                "video {id} has no features in {}",
                flag("--features", a.features.as_deref().unwrap_or(Path::new("")))
            ))
            .into()),
        }
    };

    let roi = RoiConfig {
        bins: a.bins,
        samples_per_bin: a.samples_per_bin,
        context_ratio: a.context,
    };
    let refiners: Vec<Box<dyn Refiner>> = if let Some(p) = &a.params {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Io { path: p.clone(), source: e })
            .with_context(|| flag("--params", p))?;
        let stages = RefinerParams::stages_from_json(&text).with_context(|| flag("--params", p))?;
        if stages.len() != a.stages {
            return Err(Error::Validation(format!(
                "{} holds {} stages but --stages is {}",
                flag("--params", p),
                stages.len(),
                a.stages
            ))
            .into());
        }
        stages.into_iter().map(|s| Box::new(s) as Box<dyn Refiner>).collect()
    } else if let Some(alpha) = a.oracle {
        (0..a.stages)
            .map(|_| Ok(Box::new(oracle_refiner(alpha)?) as Box<dyn Refiner>))
            .collect::<talon::Result<_>>()
            .context("--oracle")?
    } else if a.fit {
        let training = sets
            .iter()
            .filter_map(|(id, ps)| {
                let v = db.get(id)?;
                (v.subset == Subset::Training).then_some((id, ps, v))
            })
            .map(|(id, ps, video)| {
                Ok(TrainingVideo {
                    proposals: ps.clone(),
                    feats: feats_for(id)?,
                    video,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if training.is_empty() {
            return Err(Error::Validation("--fit found no training-subset videos in --proposals".into()).into());
        }
        let stages = fit_cascade(&training, &a.thresholds, &roi, a.ridge).context("--fit")?;
        log::info!("fitted {} stages on {} training videos", stages.len(), training.len());
        if let Some(p) = &a.save_params {
            write_to("--save-params", p, RefinerParams::stages_to_json(&stages).as_bytes())?;
        }
        stages.into_iter().map(|s| Box::new(s) as Box<dyn Refiner>).collect()
    } else {
        return Err(Error::Validation("one of --params, --oracle or --fit is required".into()).into());
    };

    let mut cascade = CascadeConfig::with_thresholds(refiners, &a.thresholds, roi).context("--thresholds")?;
    cascade.fusion = match a.fusion {
        FusionArg::Iou => ScoreFusion::IouOnly,
        FusionArg::Multiply => ScoreFusion::Multiply,
    };
    let post = a.post_nms.then(|| nms_opts(&a.nms_opts));
    let entries: Vec<(&String, &talon::ProposalSet)> = sets.iter().collect();
    let out = entries
        .par_iter()
        .map(|(id, ps)| {
            let v = record(&db, id, &source)?;
            let mut refined = cascade_refine(ps, &cascade, feats_for(id)?, v)?;
            if let Some(o) = &post {
                refined = soft_nms(&refined, o)?;
            }
            Ok(((*id).clone(), refined))
        })
        .collect::<Result<VideoProposals>>()?;
    io::write_proposals(&a.out, &out).with_context(|| flag("--out", &a.out))
}

fn model_weights(given: Option<ModelWeights>, n: usize, flag_name: &str) -> Result<ModelWeights> {
    match given {
        Some(w) if w.len() != n => Err(Error::Validation(format!(
            "{flag_name} has {} values for {n} models",
            w.len()
        ))
        .into()),
        Some(w) => Ok(w),
        None => Ok(ModelWeights::uniform(n)?),
    }
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let nms = nms_opts(&a.nms_opts);
    if !a.proposals.is_empty() {
        let models = a
            .proposals
            .iter()
            .map(|p| load_proposals("--proposals", p))
            .collect::<Result<Vec<_>>>()?;
        let w = model_weights(a.weights, models.len(), "--weights")?;
        let ids: std::collections::BTreeSet<&String> = models.iter().flat_map(|m| m.keys()).collect();
        let out = ids
            .into_par_iter()
            .map(|id| {
                let sets: Vec<_> = models.iter().map(|m| m.get(id).cloned().unwrap_or_default()).collect();
                Ok((id.clone(), fuse_proposal_sets(&sets, &w, &nms, a.merge_iou)?))
            })
            .collect::<talon::Result<VideoProposals>>()?;
        return io::write_proposals(&a.out, &out).with_context(|| flag("--out", &a.out));
    }

    let models = a
        .bundles
        .iter()
        .map(|p| load_bundles("--bundles", p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&BTreeMap<String, ScoreBundle>> = models.iter().collect();
    let w = if a.search {
        let path = a.annotations.as_ref().expect("clap enforces --annotations");
        let db_args = AnnotationArgs {
            annotations: path.clone(),
            label_index: a.label_index.clone(),
        };
        let mut db = load_db(&db_args)?;
        if let Some(s) = a.subset {
            db = db.subset(s);
        }
        let cfg = BundleSearch {
            d_target: a.target_d,
            align: a.align,
            decode: DecodeOpts::default(),
            nms,
            tious: default_tious(),
            max_an: 100,
            norm: Default::default(),
            step: a.step,
        };
        let (w, auc) = search_bundle_weights(&refs, &db, &cfg).context("--search")?;
        eprintln!("best weights {:?} with AUC {auc:.2}", w.normalized());
        w
    } else {
        model_weights(a.weights, models.len(), "--weights")?
    };
    let ids: Vec<&String> = models[0].keys().filter(|id| models.iter().all(|m| m.contains_key(*id))).collect();
    let dropped = models.iter().map(|m| m.len()).max().unwrap_or(0) - ids.len();
    if dropped > 0 {
        log::warn!("{dropped} videos are missing from at least one model and were skipped");
    }
    let out = ids
        .par_iter()
        .map(|id| {
            let bs: Vec<&ScoreBundle> = models.iter().map(|m| &m[*id]).collect();
            Ok(((*id).clone(), ensemble_bundles(&bs, &w, a.target_d, a.align)?))
        })
        .collect::<talon::Result<BTreeMap<_, _>>>()?;
    io::write_bundles(&a.out, &out).with_context(|| flag("--out", &a.out))
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.logits)
        .map_err(|e| Error::Io { path: a.logits.clone(), source: e })
        .with_context(|| flag("--logits", &a.logits))?;
    let lb = LogitsBatch::from_json(&text).with_context(|| flag("--logits", &a.logits))?;
    let labels: Option<Vec<usize>> = match &a.labels {
        Some(p) => Some(load_json("--labels", p)?),
        None => None,
    };
    let w = if a.fit {
        let labels = labels.as_deref().expect("clap enforces --labels");
        fit_adaptive_weights(&lb, labels, a.lr, a.iters).context("--fit")?
    } else {
        model_weights(a.weights, lb.n_models(), "--weights")?
    };
    let preds = classify_ensemble(&lb, &w, a.top_k).context("--top-k")?;
    let mut report = json!({ "weights": w.normalized(), "predictions": preds });
    if let Some(labels) = &labels {
        let context = || a.labels.as_deref().map(|p| flag("--labels", p)).unwrap_or_default();
        report["top1"] = json!(topk_accuracy(&preds, labels, 1).with_context(context)?);
        if a.top_k >= 5 {
            report["top5"] = json!(topk_accuracy(&preds, labels, 5).with_context(context)?);
        }
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_to("--out", &a.out, text.as_bytes())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut db = load_db(&a.db)?;
    if let Some(s) = a.subset {
        db = db.subset(s);
    }
    let proposals = load_proposals("--proposals", &a.proposals)?;
    let report = EvalReport::evaluate(&proposals, &db, a.max_an, &a.tious.0, a.auc_norm)?;
    let text = if a.json {
        let mut s = report.to_json();
        s.push('\n');
        s
    } else {
        report.to_table()
    };
    write_to("--out", &a.out, text.as_bytes())?;
    if let Some(p) = &a.curve {
        write_to("--curve", p, report.curve_csv().as_bytes())?;
    }
    Ok(())
}
