//! Seeded synthetic responder.
//!
//! Answers "Yes" with a per-target base rate conditioned on the ground truth;
//! when the prompt carries a referral clause it follows the clause with
//! probability `compliance`. Randomness is derived per request from
//! `(seed, image_id, prompt)`, so transcripts do not depend on arrival order.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_request, BackendError, VqaBackend, VqaRequest, VqaResponse};
use crate::metrics::Truth;

pub const YES_PHRASES: [&str; 5] = [
    "Yes.",
    "Yes, the image shows {t}.",
    "This image has {t}.",
    "{t} is found.",
    "The findings are consistent with {t}.",
];

pub const NO_PHRASES: [&str; 5] = [
    "No.",
    "No, there is no {t} in this image.",
    "There is no evidence of {t}.",
    "This image does not have {t}.",
    "{t} is absent.",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YesRates {
    pub p_yes_given_positive: f64,
    pub p_yes_given_negative: f64,
}

impl YesRates {
    fn for_truth(&self, truth: Truth) -> f64 {
        match truth {
            Truth::Positive => self.p_yes_given_positive,
            Truth::Negative => self.p_yes_given_negative,
        }
    }
}

impl Default for YesRates {
    fn default() -> Self {
        YesRates {
            p_yes_given_positive: 0.8,
            p_yes_given_negative: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorParams {
    #[serde(default)]
    pub default_rates: YesRates,
    /// Per-target overrides of `default_rates`.
    #[serde(default)]
    pub rates: BTreeMap<String, YesRates>,
    #[serde(default = "default_compliance")]
    pub compliance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_compliance() -> f64 {
    0.9
}

impl Default for SimulatorParams {
    fn default() -> Self {
        SimulatorParams {
            default_rates: YesRates::default(),
            rates: BTreeMap::new(),
            compliance: default_compliance(),
            seed: 0,
        }
    }
}

impl SimulatorParams {
    pub fn rates_for(&self, target: &str) -> YesRates {
        self.rates.get(target).copied().unwrap_or(self.default_rates)
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{name} = {p} is outside [0,1]"))
            }
        };
        unit("compliance", self.compliance)?;
        for (name, r) in
            std::iter::once(("default", &self.default_rates)).chain(self.rates.iter().map(|(k, v)| (k.as_str(), v)))
        {
            unit(&format!("{name}.p_yes_given_positive"), r.p_yes_given_positive)?;
            unit(&format!("{name}.p_yes_given_negative"), r.p_yes_given_negative)?;
        }
        Ok(())
    }
}

/// One simulated answer. Always consumes three draws from `rng`
/// (compliance, base answer, phrasing).
pub fn simulate_answer<R: Rng>(
    params: &SimulatorParams,
    target: &str,
    truth: Truth,
    referral_percent: Option<u8>,
    rng: &mut R,
) -> String {
    let comply_draw: f64 = rng.gen();
    let yes_draw: f64 = rng.gen();
    let phrase_draw: usize = rng.gen_range(0..YES_PHRASES.len());

    let clause_says_yes = referral_percent.and_then(|n| match n {
        n if n < 50 => Some(false),
        n if n > 50 => Some(true),
        _ => None,
    });
    let says_yes = match clause_says_yes {
        Some(direction) if comply_draw < params.compliance => direction,
        _ => yes_draw < params.rates_for(target).for_truth(truth),
    };
    let bank = if says_yes { &YES_PHRASES } else { &NO_PHRASES };
    bank[phrase_draw].replace("{t}", target)
}

/// What the simulator reads back out of a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFacts {
    pub target: String,
    pub referral_percent: Option<u8>,
}

pub fn parse_prompt(prompt: &str) -> Option<PromptFacts> {
    const QUESTION: &str = "oes this image have ";
    let at = prompt.rfind(QUESTION)?;
    let target = prompt[at + QUESTION.len()..].trim_end().strip_suffix('?')?.to_string();
    let clause = format!("another agent thinks the probability that it has {target} is ");
    let referral_percent = prompt.find(&clause).and_then(|i| {
        let rest = &prompt[i + clause.len()..];
        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
        rest[digits.len()..]
            .starts_with(" percent")
            .then(|| digits.parse().ok())
            .flatten()
    });
    Some(PromptFacts {
        target,
        referral_percent,
    })
}

/// Synthetic backend; knows the ground truth of every `(image_id, target)`.
pub struct SimBackend {
    params: SimulatorParams,
    truth: HashMap<(String, String), Truth>,
    id: String,
}

impl SimBackend {
    pub fn new(params: SimulatorParams, truth: HashMap<(String, String), Truth>) -> Self {
        let id = format!("sim-{}", params.seed);
        SimBackend { params, truth, id }
    }

    fn rng_for(&self, request: &VqaRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.params.seed.to_le_bytes());
        h.update(request.image_id.as_bytes());
        h.update([0u8]);
        h.update(request.prompt.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl VqaBackend for SimBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn ask(&self, request: &VqaRequest) -> Result<VqaResponse, BackendError> {
        check_request(request)?;
        let facts = parse_prompt(&request.prompt)
            .ok_or_else(|| BackendError::InvalidRequest("prompt has no `does this image have` question".into()))?;
        let truth = self
            .truth
            .get(&(request.image_id.clone(), facts.target.clone()))
            .copied()
            .ok_or_else(|| {
                BackendError::InvalidRequest(format!("no ground truth for ({}, {})", request.image_id, facts.target))
            })?;
        let mut rng = self.rng_for(request);
        let text = simulate_answer(&self.params, &facts.target, truth, facts.referral_percent, &mut rng);
        Ok(VqaResponse {
            text,
            latency: Duration::ZERO,
            backend_id: self.id.clone(),
        })
    }
}
