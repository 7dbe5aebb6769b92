//! Line-oriented `key=value` text used for config files and checkpoint
//! headers. Blank lines and `#` comments are ignored.

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::invalid(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(existing, _): &(String, String)| existing == key) {
            return Err(Error::invalid(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        out.push((key.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::invalid(format!("{key}: cannot parse {v:?}: {e}")))
}

/// Comma separated list of exactly `N` items.
pub fn array<T: std::str::FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let items = v.split(',').map(|s| value(key, s.trim())).collect::<Result<Vec<T>>>()?;
    let len = items.len();
    items
        .try_into()
        .map_err(|_| Error::invalid(format!("{key}: expected {N} comma separated values, got {len}")))
}

pub fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_junk() {
        let kv = parse("# header\nsteps = 10\n\nlr=1e-3 # trailing\n").unwrap();
        assert_eq!(kv, vec![("steps".into(), "10".into()), ("lr".into(), "1e-3".into())]);
        assert!(parse("steps 10").is_err());
        assert!(parse("a=1\na=2").is_err());
    }

    #[test]
    fn arrays_need_exact_length() {
        let a: [usize; 3] = array("blocks", "1, 2,3").unwrap();
        assert_eq!(a, [1, 2, 3]);
        assert!(array::<usize, 3>("blocks", "1,2").is_err());
        assert_eq!(join(&a), "1,2,3");
    }
}
