//! The autoregressive generation loop: per step, run the original pass,
//! build the degraded inputs from the original pass's attention row, run
//! their passes, combine, mask, renormalize, decode, append, and record a
//! full step trace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, ForwardOutput, Segment, TokenId, TokenSequence, EOS_TOKEN,
};
use crate::contrast::{self, ContrastError, ContrastSpec, HalModelTag, Schedule};
use crate::numerics::{self, LogitVector, NumericsError, ProbDistribution};
use crate::pruning::{self, PruningError, RetentionPolicy};

/// Number of top probability entries recorded per distribution in a trace.
pub const TRACE_TOP_K: usize = 10;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("backend failure at step {step}: {source}")]
    Backend { step: u64, source: BackendError },
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    M3id,
    Sid,
    Crops,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::M3id => "m3id",
            Method::Sid => "sid",
            Method::Crops => "crops",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "m3id" => Ok(Method::M3id),
            "sid" => Ok(Method::Sid),
            "crops" => Ok(Method::Crops),
            other => Err(format!(
                "unknown method {other:?}; expected baseline, m3id, sid, or crops"
            )),
        }
    }
}

/// Knobs of one generation run. Defaults are the shared configuration used
/// throughout: `alpha1 = 1`, `gamma = 0.02`, retention `10 + 30(1-e^(-t/1000))`,
/// 25% visual retention, plausibility 0.1, nucleus `top_p = 0.9` at
/// temperature 1, pruning layer 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub method: Method,
    /// Constant coefficient on the sparse-visual contrast.
    pub alpha1: f64,
    /// Growth rate of the time-dependent coefficient.
    pub gamma: f64,
    /// Retention floor.
    pub beta0: f64,
    /// Retention headroom above the floor.
    pub beta1: f64,
    /// Retention growth rate.
    pub mu: f64,
    /// Fraction of visual tokens the sparse-visual pass keeps.
    pub visual_fraction: f64,
    /// Plausibility threshold relative to the original model's peak.
    pub beta_p: f64,
    /// Nucleus mass; `None` selects greedy decoding.
    pub top_p: Option<f64>,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Offset applied to the time-dependent schedule (the answer-span
    /// position in binary VQA runs).
    pub t0: u64,
    pub seed: u64,
    /// Transformer layer the attention row is read from.
    pub attention_layer: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            method: Method::Crops,
            alpha1: 1.0,
            gamma: 0.02,
            beta0: 10.0,
            beta1: 30.0,
            mu: 1e-3,
            visual_fraction: 0.25,
            beta_p: 0.1,
            top_p: Some(0.9),
            temperature: 1.0,
            max_new_tokens: 16,
            t0: 0,
            seed: 0,
            attention_layer: 2,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |msg: String| Err(EngineError::Config(msg));
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be at least 1".into());
        }
        if !(self.alpha1 >= 0.0) {
            return fail(format!("alpha1 must be non-negative, got {}", self.alpha1));
        }
        if !(self.gamma > 0.0) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.visual_fraction > 0.0 && self.visual_fraction <= 1.0) {
            return fail(format!(
                "visual_fraction must be in (0, 1], got {}",
                self.visual_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.beta_p) {
            return fail(format!("beta_p must be in [0, 1], got {}", self.beta_p));
        }
        if let Some(top_p) = self.top_p {
            if !(top_p > 0.0 && top_p <= 1.0) {
                return fail(format!("top_p must be in (0, 1], got {top_p}"));
            }
        }
        if !(self.temperature > 0.0) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        for (name, v) in [("beta0", self.beta0), ("beta1", self.beta1), ("mu", self.mu)] {
            if !(v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn retention_policy(&self) -> RetentionPolicy {
        RetentionPolicy::Exponential {
            beta0: self.beta0,
            beta1: self.beta1,
            mu: self.mu,
        }
    }

    /// Which degraded models the configured method contrasts against.
    pub fn contrast_spec(&self) -> Option<ContrastSpec> {
        let schedule = Schedule::m3id_exponential(self.gamma, self.t0);
        let components = match self.method {
            Method::Baseline => return None,
            Method::Sid => vec![(HalModelTag::VisHal, Schedule::constant(self.alpha1))],
            Method::M3id => vec![(HalModelTag::NoVis, schedule)],
            Method::Crops => vec![
                (HalModelTag::VisHal, Schedule::constant(self.alpha1)),
                (HalModelTag::VisTxtHal, schedule),
            ],
        };
        Some(ContrastSpec::new(components, self.beta_p).expect("validated config"))
    }
}

/// Probability entries `(token id, probability)` sorted by decreasing mass,
/// ties by index, truncated to [`TRACE_TOP_K`].
pub fn top_k_entries(p: &ProbDistribution) -> Vec<(u32, f64)> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        p.values()[b]
            .partial_cmp(&p.values()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(TRACE_TOP_K)
        .map(|i| (i as u32, p.values()[i]))
        .collect()
}

/// Per-step record of the component distributions, pruning decisions,
/// dependency metrics, and the chosen token.
///
/// Fields are present only for methods that compute the corresponding pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based generation step.
    pub step: u64,
    pub chosen: TokenId,
    /// Time-dependent contrast coefficient at this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha2: Option<f64>,
    /// Text tokens retained by the pruned-text pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_text_positions: Option<Vec<usize>>,
    /// Ids of the text tokens the pruned-text pass dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pruned_text_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_visual_positions: Option<Vec<usize>>,
    pub top_orig: Vec<(u32, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_vis_hal: Option<Vec<(u32, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_vis_txt_hal: Option<Vec<(u32, f64)>>,
    /// Hellinger distance between the full-input and no-visual distributions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vd: Option<f64>,
    /// Hellinger distance between the full-input and pruned-text distributions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vtd: Option<f64>,
    /// Jensen-Shannon divergence between the two degraded distributions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsd_hal: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<TokenId>,
    pub traces: Vec<StepTrace>,
    pub termination: Termination,
}

/// Degraded-pass inputs derived from one original pass.
struct StepInputs {
    vis_hal: Option<TokenSequence>,
    vis_txt_hal: Option<TokenSequence>,
    no_vis: Option<TokenSequence>,
    eta: Option<usize>,
    kept_text_positions: Option<Vec<usize>>,
    pruned_text_tokens: Option<Vec<u32>>,
    kept_visual_positions: Option<Vec<usize>>,
}

fn build_step_inputs(
    seq: &TokenSequence,
    orig: &ForwardOutput,
    cfg: &GenerationConfig,
    visual: &[TokenId],
    prompt: &[TokenId],
    generated: &[TokenId],
    step: u64,
) -> Result<StepInputs, EngineError> {
    let needs_vis_hal = matches!(cfg.method, Method::Sid | Method::Crops);
    let needs_vis_txt_hal = matches!(cfg.method, Method::Crops);
    // The no-visual pass feeds the combination for the mutual-information
    // method and doubles as the probe behind the per-step visual-dependency
    // metric, so the two-model method runs it as well.
    let needs_no_vis = matches!(cfg.method, Method::M3id | Method::Crops);

    let mut inputs = StepInputs {
        vis_hal: None,
        vis_txt_hal: None,
        no_vis: None,
        eta: None,
        kept_text_positions: None,
        pruned_text_tokens: None,
        kept_visual_positions: None,
    };

    if needs_vis_hal {
        let visual_positions = seq.segment_positions(Segment::Visual);
        let kept_positions = if visual_positions.is_empty() {
            Vec::new()
        } else {
            let psi = pruning::importance_scores(&orig.attention, &visual_positions)?;
            pruning::sparsify_visual(&psi, cfg.visual_fraction)
        };
        let kept_visual: Vec<TokenId> = kept_positions.iter().map(|&p| seq.tokens()[p].0).collect();
        inputs.vis_hal = Some(
            TokenSequence::from_parts(&kept_visual, prompt, generated)
                .expect("prompt stays non-empty"),
        );
        inputs.kept_visual_positions = Some(kept_positions);
    }

    if needs_vis_txt_hal {
        let text_positions: Vec<usize> = seq
            .segment_positions(Segment::Prompt)
            .into_iter()
            .chain(seq.segment_positions(Segment::Generated))
            .collect();
        let eta = pruning::retention_count(&cfg.retention_policy(), step, text_positions.len())?;
        let psi = pruning::importance_scores(&orig.attention, &text_positions)?;
        let mut kept = pruning::least_important_keep(&psi, eta);
        // BOS is always retained: prepend it when pruned away.
        let bos_position = seq.first_prompt_position();
        if !kept.contains(&bos_position) {
            kept.insert(0, bos_position);
        }
        let kept_tokens: Vec<(TokenId, Segment)> =
            kept.iter().map(|&p| seq.tokens()[p]).collect();
        let pruned: Vec<u32> = text_positions
            .iter()
            .filter(|p| !kept.contains(p))
            .map(|&p| seq.tokens()[p].0 .0)
            .collect();
        inputs.vis_txt_hal =
            Some(TokenSequence::from_tokens(kept_tokens).expect("BOS keeps the prompt non-empty"));
        inputs.eta = Some(eta);
        inputs.kept_text_positions = Some(kept);
        inputs.pruned_text_tokens = Some(pruned);
    }

    if needs_no_vis {
        inputs.no_vis = Some(
            TokenSequence::from_parts(&[], prompt, generated).expect("prompt stays non-empty"),
        );
    }

    Ok(inputs)
}

/// Runs the degraded passes, in parallel when the backend allows it.
/// Outputs land in fixed slots so the combination order never depends on
/// completion order.
fn run_degraded_passes<B: Backend + ?Sized>(
    backend: &B,
    inputs: &StepInputs,
    step: u64,
) -> Result<[Option<ForwardOutput>; 3], EngineError> {
    let seqs = [
        inputs.vis_hal.as_ref(),
        inputs.vis_txt_hal.as_ref(),
        inputs.no_vis.as_ref(),
    ];
    let pending = seqs.iter().filter(|s| s.is_some()).count();
    let wrap = |source: BackendError| EngineError::Backend { step, source };

    if backend.descriptor().serialized_access || pending < 2 {
        let mut out: [Option<ForwardOutput>; 3] = [None, None, None];
        for (slot, seq) in out.iter_mut().zip(seqs) {
            if let Some(seq) = seq {
                *slot = Some(backend.forward(seq).map_err(wrap)?);
            }
        }
        return Ok(out);
    }

    let results = std::thread::scope(|scope| {
        let handles = seqs.map(|seq| seq.map(|seq| scope.spawn(move || backend.forward(seq))));
        handles.map(|h| h.map(|h| h.join().expect("forward pass panicked")))
    });
    let mut out: [Option<ForwardOutput>; 3] = [None, None, None];
    for (slot, result) in out.iter_mut().zip(results) {
        if let Some(result) = result {
            *slot = Some(result.map_err(wrap)?);
        }
    }
    Ok(out)
}

/// Generates up to `cfg.max_new_tokens` tokens, recording one [`StepTrace`]
/// per emitted token. Deterministic given the config seed.
pub fn generate<B: Backend + ?Sized>(
    backend: &B,
    visual: &[TokenId],
    prompt: &[TokenId],
    cfg: &GenerationConfig,
) -> Result<GenerationResult, EngineError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(EngineError::Config("prompt must be non-empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut generated: Vec<TokenId> = Vec::new();
    let mut traces: Vec<StepTrace> = Vec::new();
    let mut termination = Termination::MaxLength;

    for step in 1..=cfg.max_new_tokens as u64 {
        let seq = TokenSequence::from_parts(visual, prompt, &generated)
            .map_err(|e| EngineError::Config(e.to_string()))?;
        let orig = backend
            .forward(&seq)
            .map_err(|source| EngineError::Backend { step, source })?;
        let lp_orig = numerics::log_softmax(&orig.logits)?;
        let p_orig = lp_orig.to_probs()?;

        let inputs = build_step_inputs(&seq, &orig, cfg, visual, prompt, &generated, step)?;
        let [vis_hal_out, vis_txt_hal_out, no_vis_out] =
            run_degraded_passes(backend, &inputs, step)?;

        let degraded_probs = |out: &Option<ForwardOutput>| -> Result<
            Option<(LogitVector, ProbDistribution)>,
            EngineError,
        > {
            match out {
                Some(out) => {
                    let lp = numerics::log_softmax(&out.logits)?;
                    let p = lp.to_probs()?;
                    Ok(Some((lp, p)))
                }
                None => Ok(None),
            }
        };
        let vis_hal = degraded_probs(&vis_hal_out)?;
        let vis_txt_hal = degraded_probs(&vis_txt_hal_out)?;
        let no_vis = degraded_probs(&no_vis_out)?;

        let alpha2 = match cfg.method {
            Method::M3id | Method::Crops => Some(contrast::schedule_value(
                &Schedule::m3id_exponential(cfg.gamma, cfg.t0),
                step,
            )),
            Method::Baseline | Method::Sid => None,
        };

        let scores = match cfg.method {
            Method::Baseline => lp_orig.clone(),
            Method::Sid => {
                let (lp_vh, _) = vis_hal.as_ref().expect("sid runs the sparse-visual pass");
                contrast::contrastive_combine(&lp_orig, lp_vh, cfg.alpha1)?
            }
            Method::M3id => {
                let (lp_nv, _) = no_vis.as_ref().expect("m3id runs the no-visual pass");
                contrast::m3id_combine(&lp_orig, lp_nv, step, cfg.gamma, cfg.t0)?
            }
            Method::Crops => {
                let (lp_vh, _) = vis_hal.as_ref().expect("crops runs the sparse-visual pass");
                let (lp_vth, _) = vis_txt_hal
                    .as_ref()
                    .expect("crops runs the pruned-text pass");
                contrast::crops_combine(
                    &lp_orig, lp_vh, lp_vth, cfg.alpha1, step, cfg.gamma, cfg.t0,
                )?
            }
        };

        let masked = contrast::plausibility_mask(&scores, &p_orig, cfg.beta_p)?;
        let p_final = numerics::log_softmax(&masked)?.to_probs()?;
        let chosen_index = match cfg.top_p {
            Some(top_p) => numerics::nucleus_sample(&p_final, top_p, cfg.temperature, &mut rng)?,
            None => numerics::greedy_pick(&p_final),
        };
        let chosen = TokenId(chosen_index as u32);

        let vd = match &no_vis {
            Some((_, p_nv)) => Some(numerics::hellinger(&p_orig, p_nv)?),
            None => None,
        };
        let vtd = match &vis_txt_hal {
            Some((_, p_vth)) => Some(numerics::hellinger(&p_orig, p_vth)?),
            None => None,
        };
        let jsd_hal = match (&vis_hal, &vis_txt_hal) {
            (Some((_, p_vh)), Some((_, p_vth))) => {
                Some(numerics::jensen_shannon(p_vh, p_vth)?)
            }
            _ => None,
        };

        traces.push(StepTrace {
            step,
            chosen,
            alpha2,
            eta: inputs.eta,
            kept_text_positions: inputs.kept_text_positions,
            pruned_text_tokens: inputs.pruned_text_tokens,
            kept_visual_positions: inputs.kept_visual_positions,
            top_orig: top_k_entries(&p_orig),
            top_vis_hal: vis_hal.as_ref().map(|(_, p)| top_k_entries(p)),
            top_vis_txt_hal: vis_txt_hal.as_ref().map(|(_, p)| top_k_entries(p)),
            vd,
            vtd,
            jsd_hal,
        });
        generated.push(chosen);

        if chosen == EOS_TOKEN {
            termination = Termination::Eos;
            break;
        }
    }

    Ok(GenerationResult {
        tokens: generated,
        traces,
        termination,
    })
}

/// One divergence found while replaying a generation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayMismatch {
    pub step: u64,
    pub field: String,
    pub detail: String,
}

/// Outcome of [`replay_trace`]: empty means the regeneration reproduced the
/// recorded result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub mismatches: Vec<ReplayMismatch>,
}

impl ReplayReport {
    pub fn is_match(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Tolerance for trace floats when replaying a generation.
pub const REPLAY_TOLERANCE: f64 = 1e-12;

fn compare_opt_float(
    mismatches: &mut Vec<ReplayMismatch>,
    step: u64,
    field: &str,
    recorded: Option<f64>,
    regenerated: Option<f64>,
) {
    match (recorded, regenerated) {
        (Some(a), Some(b)) if (a - b).abs() > REPLAY_TOLERANCE => {
            mismatches.push(ReplayMismatch {
                step,
                field: field.into(),
                detail: format!("recorded {a}, regenerated {b}"),
            });
        }
        (Some(_), None) | (None, Some(_)) => mismatches.push(ReplayMismatch {
            step,
            field: field.into(),
            detail: "field presence differs".into(),
        }),
        _ => {}
    }
}

fn compare_top_k(
    mismatches: &mut Vec<ReplayMismatch>,
    step: u64,
    field: &str,
    recorded: Option<&Vec<(u32, f64)>>,
    regenerated: Option<&Vec<(u32, f64)>>,
) {
    match (recorded, regenerated) {
        (Some(a), Some(b)) => {
            if a.len() != b.len()
                || a.iter().zip(b).any(|((ia, pa), (ib, pb))| {
                    ia != ib || (pa - pb).abs() > REPLAY_TOLERANCE
                })
            {
                mismatches.push(ReplayMismatch {
                    step,
                    field: field.into(),
                    detail: "top-k entries differ".into(),
                });
            }
        }
        (Some(_), None) | (None, Some(_)) => mismatches.push(ReplayMismatch {
            step,
            field: field.into(),
            detail: "field presence differs".into(),
        }),
        (None, None) => {}
    }
}

/// Regenerates with the same inputs and config and reports every divergence
/// from the recorded result, in step order.
pub fn replay_trace<B: Backend + ?Sized>(
    backend: &B,
    visual: &[TokenId],
    prompt: &[TokenId],
    cfg: &GenerationConfig,
    recorded: &GenerationResult,
) -> Result<ReplayReport, EngineError> {
    let regenerated = generate(backend, visual, prompt, cfg)?;
    let mut mismatches = Vec::new();

    let steps = recorded.traces.len().max(regenerated.traces.len());
    for i in 0..steps {
        let step = (i + 1) as u64;
        let (rec, reg) = match (recorded.traces.get(i), regenerated.traces.get(i)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                mismatches.push(ReplayMismatch {
                    step,
                    field: "length".into(),
                    detail: format!(
                        "recorded {} steps, regenerated {}",
                        recorded.traces.len(),
                        regenerated.traces.len()
                    ),
                });
                break;
            }
        };
        compare_opt_float(&mut mismatches, step, "alpha2", rec.alpha2, reg.alpha2);
        if rec.eta != reg.eta {
            mismatches.push(ReplayMismatch {
                step,
                field: "eta".into(),
                detail: format!("recorded {:?}, regenerated {:?}", rec.eta, reg.eta),
            });
        }
        if rec.chosen != reg.chosen {
            mismatches.push(ReplayMismatch {
                step,
                field: "token".into(),
                detail: format!(
                    "recorded {}, regenerated {}",
                    rec.chosen.0, reg.chosen.0
                ),
            });
        }
        if rec.kept_text_positions != reg.kept_text_positions
            || rec.pruned_text_tokens != reg.pruned_text_tokens
            || rec.kept_visual_positions != reg.kept_visual_positions
        {
            mismatches.push(ReplayMismatch {
                step,
                field: "pruning".into(),
                detail: "kept/pruned sets differ".into(),
            });
        }
        compare_top_k(&mut mismatches, step, "top_orig", Some(&rec.top_orig), Some(&reg.top_orig));
        compare_top_k(
            &mut mismatches,
            step,
            "top_vis_hal",
            rec.top_vis_hal.as_ref(),
            reg.top_vis_hal.as_ref(),
        );
        compare_top_k(
            &mut mismatches,
            step,
            "top_vis_txt_hal",
            rec.top_vis_txt_hal.as_ref(),
            reg.top_vis_txt_hal.as_ref(),
        );
        compare_opt_float(&mut mismatches, step, "vd", rec.vd, reg.vd);
        compare_opt_float(&mut mismatches, step, "vtd", rec.vtd, reg.vtd);
        compare_opt_float(&mut mismatches, step, "jsd_hal", rec.jsd_hal, reg.jsd_hal);
    }
    if recorded.termination != regenerated.termination {
        mismatches.push(ReplayMismatch {
            step: steps as u64,
            field: "termination".into(),
            detail: "termination reason differs".into(),
        });
    }

    Ok(ReplayReport { mismatches })
}
