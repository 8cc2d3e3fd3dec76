use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema_version: &'static str,
    pub command: String,
    pub problem_hash: Option<String>,
    pub params: Value,
    pub result: Value,
    pub witnesses: Vec<Value>,
    pub warnings: Vec<String>,
    pub wall_time_ms: u64,
}

/// SHA-256 of the text with every run of whitespace collapsed to one space
/// within lines and blank lines dropped.
pub fn problem_hash(text: &str) -> String {
    let canonical: Vec<String> = text
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect();
    hex::encode(Sha256::digest(canonical.join("\n").as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_cosmetic_whitespace() {
        let a = "[problem] name=a dp=0 dx=1\n[ineq]\nh1 = x1\n";
        let b = "  [problem]   name=a dp=0  dx=1\n\n[ineq]\nh1 =   x1   \n\n";
        assert_eq!(problem_hash(a), problem_hash(b));
        assert_ne!(problem_hash(a), problem_hash("[problem] name=a dp=0 dx=1\n[ineq]\nh1 = -x1\n"));
    }
}
