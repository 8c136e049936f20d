//! Reward functions for reinforcement learning: a binary structural
//! format reward over chain-of-thought text and an embedding-cosine
//! consistency reward over generated images.

use serde::{Deserialize, Serialize};

use crate::concept_world::{cosine, ConceptError, FrozenEmbedder, Image};

/// Result of parsing a chain-of-thought string against the strict
/// `<think>...</think><answer>...</answer>` grammar. `well_formed` holds
/// iff the text is exactly one think block followed by one answer block,
/// with only whitespace and an optional trailing `<img>`/`<eos>` outside
/// the tags and no stray `<`/`>` inside them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotParse {
    pub think: Option<String>,
    pub answer: Option<String>,
    pub well_formed: bool,
}

/// Never fails: malformed input yields `well_formed = false` with
/// best-effort extracted spans.
pub fn parse_cot(text: &str) -> CotParse {
    let think = extract_span(text, "<think>", "</think>");
    let answer = extract_span(text, "<answer>", "</answer>");
    let well_formed = check_strict(text);
    CotParse {
        think,
        answer,
        well_formed,
    }
}

fn extract_span(text: &str, open: &str, close: &str) -> Option<String> {
    let start = text.find(open)? + open.len();
    let end = start + text[start..].find(close)?;
    Some(text[start..end].to_string())
}

fn check_strict(text: &str) -> bool {
    let s = text.trim_start();
    let Some(s) = s.strip_prefix("<think>") else {
        return false;
    };
    let Some(end) = s.find("</think>") else {
        return false;
    };
    let think = &s[..end];
    if think.contains('<') || think.contains('>') {
        return false;
    }
    let s = s[end + "</think>".len()..].trim_start();
    let Some(s) = s.strip_prefix("<answer>") else {
        return false;
    };
    let Some(end) = s.find("</answer>") else {
        return false;
    };
    let answer = &s[..end];
    if answer.contains('<') || answer.contains('>') {
        return false;
    }
    let mut tail = s[end + "</answer>".len()..].trim_start();
    for tok in ["<img>", "<eos>"] {
        if let Some(rest) = tail.strip_prefix(tok) {
            tail = rest.trim_start();
        }
    }
    tail.is_empty()
}

/// 1 iff the text matches the strict chain-of-thought structure.
pub fn format_reward(text: &str) -> f64 {
    if parse_cot(text).well_formed {
        1.0
    } else {
        0.0
    }
}

/// Cosine similarity between the generated image's embedding and the
/// ground-truth prompt's embedding, in [-1, 1]. A degenerate image whose
/// embedding cannot be normalized scores 0 rather than failing, since the
/// image comes from an untrusted generator.
pub fn consistency_reward(
    embedder: &FrozenEmbedder,
    image: &Image,
    gt_prompt: &str,
) -> Result<f64, ConceptError> {
    let vi = match embedder.embed_image(image) {
        Ok(v) => v,
        Err(ConceptError::DegenerateEmbedding) => return Ok(0.0),
        Err(e) => return Err(e),
    };
    let vp = embedder.embed_prompt(gt_prompt)?;
    Ok(cosine(&vi, &vp))
}

/// Which reward components are active; disabling one zeroes it, which is
/// how the reward-strategy ablations are run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub use_format: bool,
    pub use_consistency: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            use_format: true,
            use_consistency: true,
        }
    }
}

/// Reward components, kept separate for logging; `total` is their
/// unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub format: f64,
    pub consistency: f64,
    pub total: f64,
}

pub fn total_reward(
    embedder: &FrozenEmbedder,
    text: &str,
    image: &Image,
    gt_prompt: &str,
    cfg: &RewardConfig,
) -> Result<RewardScore, ConceptError> {
    let format = if cfg.use_format {
        format_reward(text)
    } else {
        0.0
    };
    let consistency = if cfg.use_consistency {
        consistency_reward(embedder, image, gt_prompt)?
    } else {
        0.0
    };
    Ok(RewardScore {
        format,
        consistency,
        total: format + consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_world::{parse_prompt, render};

    #[test]
    fn well_formed_example_parses() {
        let p = parse_cot("<think>4+1=5</think><answer>red pentagon</answer>");
        assert!(p.well_formed);
        assert_eq!(p.think.as_deref(), Some("4+1=5"));
        assert_eq!(p.answer.as_deref(), Some("red pentagon"));
        assert_eq!(
            format_reward("<think>4+1=5</think><answer>red pentagon</answer>"),
            1.0
        );
    }

    #[test]
    fn reversed_order_rejected() {
        assert!(!parse_cot("<answer>x</answer><think>y</think>").well_formed);
    }

    #[test]
    fn duplicate_think_rejected() {
        assert!(!parse_cot("<think>a</think><think>b</think><answer>c</answer>").well_formed);
    }

    #[test]
    fn empty_and_unclosed_rejected() {
        assert_eq!(format_reward(""), 0.0);
        assert_eq!(format_reward("<think>a</think><answer>b"), 0.0);
    }

    #[test]
    fn trailing_img_and_eos_allowed() {
        assert_eq!(
            format_reward("<think>a</think><answer>b</answer><img>"),
            1.0
        );
        assert_eq!(
            format_reward(" <think>a</think> <answer>b</answer> <img><eos> "),
            1.0
        );
        assert_eq!(
            format_reward("<think>a</think><answer>b</answer>junk"),
            0.0
        );
    }

    #[test]
    fn parse_never_panics_on_garbage() {
        for s in ["<<<>>>", "<think>", "</answer><answer>", "x<img>y"] {
            let _ = parse_cot(s);
        }
    }

    #[test]
    fn consistency_peaks_at_own_prompt() {
        let emb = FrozenEmbedder::new();
        let c = parse_prompt("red triangle").unwrap();
        let img = render(&c);
        assert_eq!(consistency_reward(&emb, &img, "red triangle").unwrap(), 1.0);
        let other = consistency_reward(&emb, &img, "blue square").unwrap();
        assert!(other < 1.0);
    }

    #[test]
    fn zero_image_gives_finite_reward() {
        let emb = FrozenEmbedder::new();
        let img = Image::zeros();
        let r = consistency_reward(&emb, &img, "red triangle").unwrap();
        assert!(r.is_finite() && (-1.0..1.0).contains(&r));
    }

    #[test]
    fn total_is_component_sum() {
        let emb = FrozenEmbedder::new();
        let cfg = RewardConfig::default();
        let c = parse_prompt("green hexagon").unwrap();
        let img = render(&c);
        let good = total_reward(
            &emb,
            "<think>ok</think><answer>green hexagon</answer>",
            &img,
            "green hexagon",
            &cfg,
        )
        .unwrap();
        assert_eq!(good.total, 2.0);
        let bad_text = total_reward(&emb, "no tags", &img, "green hexagon", &cfg).unwrap();
        assert_eq!(bad_text.total, 1.0);
    }

    #[test]
    fn disabled_components_zeroed() {
        let emb = FrozenEmbedder::new();
        let cfg = RewardConfig {
            use_consistency: false,
            ..RewardConfig::default()
        };
        let c = parse_prompt("red triangle").unwrap();
        let img = render(&c);
        let r = total_reward(
            &emb,
            "<think>a</think><answer>red triangle</answer>",
            &img,
            "red triangle",
            &cfg,
        )
        .unwrap();
        assert_eq!(r.consistency, 0.0);
        assert_eq!(r.total, 1.0);
    }
}
