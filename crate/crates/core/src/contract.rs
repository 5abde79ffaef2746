//! Conformance checks for an adapter service speaking the wire protocol in
//! [`crate::backend`]. Used by `cotmr contract` and by the tests that run
//! the suite against an in-process mock server.

use std::fmt;

use crate::backend::{BackendError, ChatBackend, EmbedBackend, EmbedBatch, HttpBackend};
use crate::embedding::NORM_TOLERANCE;
use crate::prompting::{build_prompt, PromptMode, Scale};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Pass,
    Fail(String),
    Skip(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractCheck {
    pub name: &'static str,
    pub outcome: CheckOutcome,
}

impl ContractCheck {
    pub fn passed(&self) -> bool {
        self.outcome == CheckOutcome::Pass
    }
}

impl fmt::Display for ContractCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            CheckOutcome::Pass => write!(f, "PASS {}", self.name),
            CheckOutcome::Fail(why) => write!(f, "FAIL {}: {why}", self.name),
            CheckOutcome::Skip(why) => write!(f, "SKIP {}: {why}", self.name),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ContractOptions {
    /// Locators the adapter can read. Image checks are skipped when empty.
    pub image_locators: Vec<String>,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(), String>) -> ContractCheck {
    let outcome = match f() {
        Ok(()) => CheckOutcome::Pass,
        Err(why) => CheckOutcome::Fail(why),
    };
    ContractCheck { name, outcome }
}

fn unit_norms(batch: &EmbedBatch, expected: usize) -> Result<(), String> {
    if batch.vectors.len() != expected {
        return Err(format!("{} vectors for {expected} inputs", batch.vectors.len()));
    }
    for (i, v) in batch.vectors.iter().enumerate() {
        if v.len() != batch.dim {
            return Err(format!("vector {i} has length {}, batch dim {}", v.len(), batch.dim));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(format!("vector {i} has norm {norm}"));
        }
    }
    Ok(())
}

fn expect_status(backend: &HttpBackend, path: &str, body: serde_json::Value, want: u16) -> Result<(), String> {
    let (status, text) = backend.post_raw(path, &body).map_err(|e| e.to_string())?;
    if status != want {
        return Err(format!("expected status {want}, got {status}: {text}"));
    }
    Ok(())
}

fn err(e: BackendError) -> String {
    e.to_string()
}

/// Runs every check in a fixed order. A failed health check fails the
/// rest without contacting the service again.
pub fn run_contract(backend: &HttpBackend, options: &ContractOptions) -> Vec<ContractCheck> {
    let mut out = Vec::new();
    let health = backend.health();
    out.push(check("health", || match &health {
        Ok(h) if h.dim == 0 => Err("dim is 0".into()),
        Ok(_) => Ok(()),
        Err(e) => Err(e.to_string()),
    }));
    let Ok(health) = health else {
        return out;
    };
    let probe = |s: &str| s.to_string();
    let texts = [probe("a red shirt with short sleeves"), probe("two manta rays in the ocean")];

    out.push(check("embed_text_unit_norm", || {
        let b = backend.embed_texts(&texts).map_err(err)?;
        if b.dim != health.dim {
            return Err(format!("dim {} differs from health dim {}", b.dim, health.dim));
        }
        unit_norms(&b, texts.len())
    }));
    out.push(check("embed_text_order", || {
        let ab = backend.embed_texts(&texts).map_err(err)?;
        let ba = backend.embed_texts(&[texts[1].clone(), texts[0].clone()]).map_err(err)?;
        if ab.vectors.len() != 2 || ba.vectors.len() != 2 {
            return Err("wrong vector count".into());
        }
        if ab.vectors[0] != ba.vectors[1] || ab.vectors[1] != ba.vectors[0] {
            return Err("vectors do not follow input order".into());
        }
        Ok(())
    }));
    out.push(check("embed_text_deterministic", || {
        let a = backend.embed_texts(&texts[..1]).map_err(err)?;
        let b = backend.embed_texts(&texts[..1]).map_err(err)?;
        if a.vectors != b.vectors {
            return Err("identical requests gave different vectors".into());
        }
        Ok(())
    }));
    out.push(check("embed_text_empty_is_400", || {
        expect_status(backend, "/v1/embed/text", serde_json::json!({ "texts": [] }), 400)
    }));
    if options.image_locators.is_empty() {
        out.push(ContractCheck {
            name: "embed_image_unit_norm",
            outcome: CheckOutcome::Skip("no image locators given".into()),
        });
    } else {
        out.push(check("embed_image_unit_norm", || {
            let b = backend.embed_images(&options.image_locators).map_err(err)?;
            unit_norms(&b, options.image_locators.len())
        }));
    }
    out.push(check("embed_image_empty_is_400", || {
        expect_status(backend, "/v1/embed/image", serde_json::json!({ "locators": [] }), 400)
    }));
    let reference = options.image_locators.first().cloned().unwrap_or_else(|| "contract-probe".into());
    out.push(check("chat_greedy_deterministic", || {
        let req = build_prompt(Scale::Image, PromptMode::CircotZeroShot, &reference, "make it blue");
        let a = backend.chat(&req).map_err(err)?;
        let b = backend.chat(&req).map_err(err)?;
        if a != b {
            return Err("two temperature-0 requests gave different text".into());
        }
        Ok(())
    }));
    out.push(check("chat_missing_messages_is_400", || {
        expect_status(backend, "/v1/chat", serde_json::json!({ "temperature": 0.0, "max_tokens": 16 }), 400)
    }));
    out
}
