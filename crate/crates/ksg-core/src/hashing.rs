//! Deterministic hashing helpers: stable ids, fingerprints, and author
//! pseudonyms. Everything here must produce identical output across
//! processes and platforms, so all hashes are SHA-256 over an unambiguous
//! length-prefixed encoding.

use sha2::{Digest, Sha256};

/// Hex SHA-256 of the given parts, each length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` hash differently.
pub fn sha256_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.len().to_string().as_bytes());
        hasher.update(b":");
        hasher.update(part.as_bytes());
        hasher.update(b";");
    }
    hex::encode(hasher.finalize())
}

/// First 12 hex characters of [`sha256_hex`]; enough for stable ids at
/// corpus scale.
pub fn short_hash(parts: &[&str]) -> String {
    sha256_hex(parts)[..12].to_string()
}

/// Stable micro-idea id: derived from the source annotation and the
/// statement text so replay runs regenerate identical ids.
pub fn micro_idea_id(source_annotation_id: &str, statement: &str) -> String {
    format!("mi_{}", short_hash(&["micro_idea", source_annotation_id, statement]))
}

/// Stable synthesis-node id: derived from the reading and the node title.
pub fn synthesis_node_id(reading_id: &str, title: &str) -> String {
    format!("sn_{}", short_hash(&["synthesis_node", reading_id, title]))
}

const PSEUDONYM_PREFIX: &str = "anon:";

/// Replace a source author string with a stable pseudonym. Idempotent:
/// already-pseudonymized values pass through unchanged so that exporting
/// and reloading a corpus does not re-hash authors.
pub fn pseudonymize_author(author: &str) -> String {
    if is_pseudonym(author) {
        return author.to_string();
    }
    format!("{}{}", PSEUDONYM_PREFIX, short_hash(&["author", author]))
}

/// True when the value already carries the pseudonym shape `anon:<12 hex>`.
pub fn is_pseudonym(value: &str) -> bool {
    match value.strip_prefix(PSEUDONYM_PREFIX) {
        Some(rest) => rest.len() == 12 && rest.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()),
        None => false,
    }
}
