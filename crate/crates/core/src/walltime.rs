//! `HH:MM:SS` walltime strings as used by batch schedulers.

use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid walltime `{0}`, expected HH:MM:SS")]
pub struct WalltimeError(pub String);

pub fn parse_walltime(text: &str) -> Result<Duration, WalltimeError> {
    let err = || WalltimeError(text.to_string());
    let mut parts = text.trim().split(':');
    let (h, m, s) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(m), Some(s), None) => (h, m, s),
        _ => return Err(err()),
    };
    let field = |p: &str, max: Option<u64>| -> Result<u64, WalltimeError> {
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let v: u64 = p.parse().map_err(|_| err())?;
        match max {
            Some(max) if v > max => Err(err()),
            _ => Ok(v),
        }
    };
    let (h, m, s) = (field(h, None)?, field(m, Some(59))?, field(s, Some(59))?);
    let secs = h
        .checked_mul(3600)
        .and_then(|h| h.checked_add(m * 60 + s))
        .ok_or_else(err)?;
    if secs == 0 {
        return Err(err());
    }
    Ok(Duration::from_secs(secs))
}

pub fn format_walltime(d: Duration) -> String {
    let s = d.as_secs();
    format!("{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}
