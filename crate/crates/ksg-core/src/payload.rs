//! Shared machinery for recovering structured payloads from raw model
//! text, plus the schema-hint vocabulary that tells backends which payload
//! shape a request expects.

use serde::de::DeserializeOwned;

/// Schema hint for stage-1 micro-idea extraction payloads.
pub const STAGE1_HINT: &str = "ksg.stage1.v1";
/// Schema hint prefix for stage-2 synthesis-node payloads.
pub const STAGE2_HINT_PREFIX: &str = "ksg.stage2.v1";
/// Schema hint prefix for stage-3 relation payloads.
pub const STAGE3_HINT_PREFIX: &str = "ksg.stage3.v1";

pub fn stage2_hint(min_nodes: usize, max_nodes: usize) -> String {
    format!("{STAGE2_HINT_PREFIX};min={min_nodes};max={max_nodes}")
}

pub fn stage3_hint(scheme_id: &str) -> String {
    format!("{STAGE3_HINT_PREFIX};scheme={scheme_id}")
}

/// Parse `key=value` parameters from a schema hint's `;`-separated tail.
pub fn hint_param<'a>(hint: &'a str, key: &str) -> Option<&'a str> {
    hint.split(';').skip(1).find_map(|part| {
        let (k, v) = part.split_once('=')?;
        (k == key).then_some(v)
    })
}

/// Find the first well-formed JSON value of type `T` embedded anywhere in
/// raw model text. Models wrap payloads in prose and code fences; this
/// scans every `{` and attempts a typed parse from that offset, so nested
/// and fenced objects are both found. `accept` performs semantic
/// validation; candidates it rejects are skipped, and the first rejection
/// is reported if nothing later matches.
pub fn extract_first_payload<T, E, F>(raw: &str, accept: F) -> Result<T, Option<E>>
where
    T: DeserializeOwned,
    F: Fn(T) -> Result<T, E>,
{
    let mut first_rejection = None;
    for (offset, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[offset..]).into_iter::<T>();
        match stream.next() {
            Some(Ok(candidate)) => match accept(candidate) {
                Ok(valid) => return Ok(valid),
                Err(e) => {
                    if first_rejection.is_none() {
                        first_rejection = Some(e);
                    }
                }
            },
            _ => continue,
        }
    }
    Err(first_rejection)
}

/// Content of the `<<<`/`>>>` block following a `NAME:` marker line in a
/// prompt. Used by the stub synthesizer to read back the sections the
/// stage templates lay out.
pub fn extract_section(prompt: &str, name: &str) -> Option<String> {
    let marker = format!("{name}:");
    let mut lines = prompt.lines();
    for line in lines.by_ref() {
        if line.trim() == marker {
            break;
        }
    }
    if lines.next()?.trim() != "<<<" {
        return None;
    }
    let mut body = Vec::new();
    for line in lines {
        if line.trim() == ">>>" {
            return Some(body.join("\n"));
        }
        body.push(line);
    }
    None
}
