use rayon::prelude::*;

use super::diversity::generate_text;
use super::prompt_conditioning_supported;
use crate::backend::Backend;
use crate::config::AuditConfig;
use crate::error::{Error, Result};
use crate::metrics::fairness;
use crate::seed::{derive_seed, text_key};
use crate::sweep::with_retry;
use crate::types::TokenInfo;

/// Lowercased chars of `s` with the byte offset each starts at.
fn lowered(s: &str) -> Vec<(usize, char)> {
    s.char_indices()
        .map(|(i, c)| (i, c.to_lowercase().next().unwrap_or(c)))
        .collect()
}

/// Tokenizer decorations that never appear in the prompt text.
fn surface(token: &str) -> String {
    token
        .trim_end_matches("</w>")
        .trim_start_matches(['Ġ', '▁'])
        .trim_start_matches("##")
        .to_string()
}

fn find_from(text: &[(usize, char)], needle: &[char], from: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > text.len() {
        return None;
    }
    (from..=text.len() - needle.len()).find(|&s| needle.iter().enumerate().all(|(k, c)| text[s + k].1 == *c))
}

/// Deletes the surface form of token `index` from `prompt`.
///
/// Tokens are aligned to the prompt left to right, case-insensitively, so a
/// repeated word removes the occurrence the token came from. Whitespace is
/// collapsed afterwards.
pub fn leave_one_out(prompt: &str, tokens: &[TokenInfo], index: usize) -> Result<String> {
    let target = tokens.get(index).ok_or(Error::TokenOutOfRange {
        index,
        rows: tokens.len(),
    })?;
    if target.special {
        return Err(Error::SpecialToken {
            index,
            text: target.text.clone(),
        });
    }
    let normalized = prompt.split_whitespace().collect::<Vec<_>>().join(" ");
    let text = lowered(&normalized);
    let mut cursor = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.special {
            continue;
        }
        let needle: Vec<char> = surface(&t.text).chars().flat_map(char::to_lowercase).collect();
        let start = find_from(&text, &needle, cursor)
            .ok_or_else(|| Error::Invalid(format!("cannot locate token {:?} in prompt {prompt:?}", t.text)))?;
        let end = start + needle.len();
        if i == index {
            let from = text[start].0;
            let to = text.get(end).map_or(normalized.len(), |c| c.0);
            let out = format!("{}{}", &normalized[..from], &normalized[to..]);
            let out = out.split_whitespace().collect::<Vec<_>>().join(" ");
            if out.is_empty() {
                return Err(Error::Invalid(format!(
                    "prompt {prompt:?} is empty after removing {:?}",
                    t.text
                )));
            }
            return Ok(out);
        }
        cursor = end;
    }
    unreachable!("index was checked against tokens")
}

/// Mean `-ln(1 - cos)` between full-prompt and leave-one-out generations
/// at low guidance, over `fairness_k` shared noise seeds.
pub fn eval_fairness<B: Backend + ?Sized>(
    prompt: &str,
    token_index: usize,
    config: &AuditConfig,
    backend: &B,
) -> Result<f64> {
    config.validate()?;
    let encoded = with_retry(config.max_retries, || backend.encode(prompt))?;
    encoded.check_content_index(token_index)?;
    let reduced = leave_one_out(prompt, encoded.tokens(), token_index)?;
    let by_prompt = prompt_conditioning_supported(backend, config.max_retries)?;
    let key = text_key(prompt);
    let pairs = (0..config.fairness_k)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(config.base_seed, &[("fairness", key), ("k", k as u64)]).expect("non-empty context");
            let full = generate_text(backend, prompt, by_prompt, config.guidance_low, config, seed)?;
            let left = generate_text(backend, &reduced, by_prompt, config.guidance_low, config, seed)?;
            Ok((left, full))
        })
        .collect::<Result<Vec<_>>>()?;
    let (left, full): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    fairness(&left, &full, config.clamp_eps)
}
