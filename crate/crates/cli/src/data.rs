use std::path::Path;

use anyhow::{Context, Result};
use pmk_core::augment::{augment as augment_rep, AugmentParams};
use pmk_core::clipselect::{load_videos, synthetic_videos, ClipVideo};
use pmk_core::config::RunConfig;
use pmk_core::encoding::save_representation;
use pmk_core::io::Meta;
use pmk_core::joints::JointGroups;
use pmk_core::manifest::{Manifest, Record, Split};
use pmk_core::synth::{generate, generate_untrimmed, SynthSpec};
use pmk_core::tensor::parallel;
use pmk_core::training::{load_encoded, Dataset};
use pmk_core::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::args::{Global, SynthArgs};

/// What `--data` points at.
pub enum Source {
    Manifest(Manifest),
    /// Generated in memory; the seed comes from the file or `--seed`.
    Synthetic(SynthSpec),
}

impl Source {
    pub fn open(path: &Path, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        match v {
            Value::Array(_) => Ok(Source::Manifest(Manifest::load(path)?)),
            Value::Object(mut m) => {
                m.entry("seed").or_insert(seed.into());
                let spec: SynthSpec = serde_json::from_value(Value::Object(m))
                    .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
                spec.validate()?;
                Ok(Source::Synthetic(spec))
            }
            _ => Err(CoreError::Config(format!("{}: expected a manifest or a synth spec", path.display())).into()),
        }
    }

    pub fn dataset(&self, cfg: &RunConfig) -> Result<Dataset> {
        Ok(match self {
            Source::Manifest(m) => Dataset::from_manifest(m, cfg.channels, cfg.norm)?,
            Source::Synthetic(s) => Dataset::synthetic(s, cfg.channels, cfg.norm)?,
        })
    }

    pub fn videos(&self, cfg: &RunConfig, window_fraction: f64) -> Result<Vec<(ClipVideo, Split)>> {
        Ok(match self {
            Source::Manifest(m) => load_videos(m, cfg)?,
            Source::Synthetic(s) => synthetic_videos(s, window_fraction, cfg)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Source::Manifest(m) => m.num_classes(),
            Source::Synthetic(s) => s.num_classes,
        }
    }
}

fn synth_spec(g: &Global, a: &SynthArgs) -> Result<SynthSpec> {
    let mut doc = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<Value>(&text).map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| CoreError::Config("synth spec must be a JSON object".into()))?;
    if let Some(s) = g.seed {
        obj.insert("seed".into(), s.into());
    }
    if let Value::Object(m) = serde_json::to_value(a)? {
        obj.extend(m);
    }
    let spec: SynthSpec = serde_json::from_value(doc).map_err(|e| CoreError::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

fn summary(m: &Manifest, out: &Path) {
    let c = m.counts();
    println!(
        "{}",
        json!({
            "manifest": out.join("manifest.json"),
            "records": m.records.len(),
            "train": c.get(&Split::Train).copied().unwrap_or(0),
            "val": c.get(&Split::Val).copied().unwrap_or(0),
        })
    );
}

pub fn synth(g: &Global, out: &Path, a: &SynthArgs) -> Result<()> {
    let spec = synth_spec(g, a)?;
    let m = generate(&spec, out)?;
    pmk_core::io::write_json(&out.join("spec.json"), &spec)?;
    summary(&m, out);
    Ok(())
}

pub fn synth_untrimmed(g: &Global, out: &Path, window_fraction: f64, per_class: usize, a: &SynthArgs) -> Result<()> {
    let spec = synth_spec(g, a)?;
    let m = generate_untrimmed(&spec, window_fraction, per_class, out)?;
    pmk_core::io::write_json(&out.join("spec.json"), &spec)?;
    summary(&m, out);
    Ok(())
}

pub fn encode(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let m = match Source::open(data, cfg.seed)? {
        Source::Manifest(m) => m,
        Source::Synthetic(_) => {
            return Err(CoreError::Config("encode needs a manifest; run `synth` first".into()).into());
        }
    };
    let records: Vec<&Record> = m.records.iter().collect();
    let written = parallel::map_range(records.len(), |i| -> pmk_core::Result<Record> {
        let r = records[i];
        let rep = load_encoded(&m.resolve(r), cfg.channels, cfg.norm)?;
        let rel = format!("rep/{}.pmkt", r.id);
        let mut meta = Meta::new();
        meta.insert("id".into(), r.id.clone().into());
        save_representation(&out.join(&rel), &rep, &meta)?;
        Ok(Record {
            path: rel,
            ..r.clone()
        })
    })
    .into_iter()
    .collect::<pmk_core::Result<Vec<_>>>()?;
    let em = Manifest::new(out, written);
    em.save(&out.join("manifest.json"))?;
    crate::write_config(out, cfg)?;
    summary(&em, out);
    Ok(())
}

pub fn augment(cfg: &RunConfig, input: &Path, out: &Path, count: usize) -> Result<()> {
    let rep = load_encoded(input, cfg.channels, cfg.norm)?;
    let params = AugmentParams {
        beta: cfg.beta,
        gamma: cfg.gamma,
        flip_prob: cfg.flip_prob,
    };
    let groups = JointGroups::coco();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for k in 0..count {
        let a = augment_rep(&rep, &groups, &params, &mut rng)?;
        let mut meta = Meta::new();
        meta.insert("draw".into(), k.into());
        save_representation(&out.join(format!("aug{k:03}.pmkt")), &a, &meta)?;
    }
    println!("{}", json!({ "out": out, "count": count }));
    Ok(())
}
