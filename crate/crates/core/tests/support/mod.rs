//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::path::PathBuf;

use base64::Engine;
use gridfm_core::llm::{ChatMessage, ContentPart, ImageRef, ImageSource, Role};
use gridfm_core::sa::{LabeledExemplar, SaApproach, SaPromptConfig};

/// Fixture files live with the core crate; the path also resolves from
/// sibling crates that include this module.
pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

/// Image whose payload is the UTF-8 bytes of `tag`.
pub fn tagged_image(tag: &str) -> ImageRef {
    ImageRef::from_bytes("image/png", tag.as_bytes())
}

fn image_tag(image: &ImageRef) -> String {
    match &image.source {
        ImageSource::Base64(data) => {
            let bytes = base64::engine::general_purpose::STANDARD.decode(data).expect("valid base64");
            String::from_utf8_lossy(&bytes).into_owned()
        }
        ImageSource::Url(url) => url.clone(),
    }
}

/// Plain-text view of a message list: role headers, one line per part,
/// images shown by media type and payload tag.
pub fn render_messages(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        let role = match m.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        out.push_str(&format!("[{role}]\n"));
        for part in &m.parts {
            match part {
                ContentPart::Text { text } => out.push_str(text),
                ContentPart::Image { image } => {
                    out.push_str(&format!("<image {}: {}>", image.media_type, image_tag(image)))
                }
            }
            out.push('\n');
        }
    }
    out
}

/// The five example images of the wildfire figure, labeled yes, yes, yes,
/// no, no, with explanations when `explained`.
pub fn figure_exemplars(explained: bool, cfg: &SaPromptConfig) -> Vec<LabeledExemplar> {
    [true, true, true, false, false]
        .iter()
        .enumerate()
        .map(|(i, &label)| LabeledExemplar {
            image: tagged_image(&format!("example-{}", i + 1)),
            label,
            explanation: explained.then(|| {
                if label {
                    cfg.positive_explanation.clone()
                } else {
                    cfg.negative_explanation.clone()
                }
            }),
        })
        .collect()
}

pub fn sa_golden_name(approach: SaApproach) -> &'static str {
    match approach {
        SaApproach::Direct => "sa/approach1_direct.txt",
        SaApproach::DirectEngineered => "sa/approach2_engineered.txt",
        SaApproach::FewShotLabeled => "sa/approach3_labeled.txt",
        SaApproach::FewShotExplained => "sa/approach4_explained.txt",
    }
}

pub mod instances {
    //! Seeded random problem instances paired with their oracle form.

    use gridfm_core::{DispatchProblem, EvProblem, EvSession, GeneratorParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::oracles::{Unit, Vehicle};

    fn two_dp(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        (rng.random_range(lo..hi) * 100.0).round() / 100.0
    }

    fn one_dp(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
        (rng.random_range(lo..hi) * 10.0).round() / 10.0
    }

    /// 3 to 5 quadratic units and a demand strictly inside the bounds.
    pub fn dispatch(seed: u64) -> (DispatchProblem, Vec<Unit>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=5);
        let units: Vec<Unit> = (0..n)
            .map(|_| {
                let p_min = two_dp(&mut rng, 5.0, 100.0);
                Unit {
                    a: two_dp(&mut rng, 0.01, 5.0),
                    b: two_dp(&mut rng, 5.0, 30.0),
                    c: two_dp(&mut rng, 0.0, 150.0),
                    p_min,
                    p_max: p_min + two_dp(&mut rng, 20.0, 200.0),
                }
            })
            .collect();
        let lo: f64 = units.iter().map(|u| u.p_min).sum();
        let hi: f64 = units.iter().map(|u| u.p_max).sum();
        let demand = two_dp(&mut rng, lo + 1.0, hi - 1.0);
        let params = units
            .iter()
            .map(|u| GeneratorParams::new(u.a, u.b, u.c, u.p_min, u.p_max))
            .collect();
        (DispatchProblem::new(params, demand).unwrap(), units)
    }

    /// Two vehicles over three steps with a shared station limit.
    pub fn ev(seed: u64) -> (EvProblem, Vec<Vehicle>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vehicles: Vec<Vehicle> = (0..2)
            .map(|_| {
                let initial = one_dp(&mut rng, 0.0, 5.0);
                Vehicle {
                    initial,
                    target: initial + one_dp(&mut rng, 0.5, 8.0),
                    u_max: one_dp(&mut rng, 0.5, 3.0),
                    depart: rng.random_range(1..=3),
                }
            })
            .collect();
        let capacity = one_dp(&mut rng, 0.5, 5.0);
        let sessions = vehicles
            .iter()
            .map(|v| EvSession::new(v.initial, v.target, v.u_max, v.depart))
            .collect();
        (EvProblem::new(sessions, 3, vec![capacity; 3]).unwrap(), vehicles, capacity)
    }
}
