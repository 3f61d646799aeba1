//! Identifiers for table instances and operations.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

const TIMESTAMP_FORMAT: &str = "%Y%m%dT%H%M%S%.6f";
const TIMESTAMP_LEN: usize = 22;

/// Identity of one version of a table.
///
/// The canonical encoding is `YYYYMMDDTHHMMSS.ffffff` with an optional
/// `_<external_id>` suffix, so lexicographic order of encodings matches
/// temporal order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InstanceId {
    generated_at: DateTime<Utc>,
    external_id: Option<String>,
}

impl InstanceId {
    pub fn new(generated_at: DateTime<Utc>, external_id: Option<String>) -> crate::Result<Self> {
        if let Some(ext) = &external_id {
            validate_external_id(ext)?;
        }
        // Truncate to microseconds so the encoding round-trips.
        let micros = generated_at.nanosecond() / 1_000 * 1_000;
        let generated_at = generated_at.with_nanosecond(micros).unwrap_or(generated_at);
        Ok(Self { generated_at, external_id })
    }

    pub fn now(external_id: Option<String>) -> crate::Result<Self> {
        Self::new(Utc::now(), external_id)
    }

    pub fn generated_at(&self) -> DateTime<Utc> {
        self.generated_at
    }

    pub fn external_id(&self) -> Option<&str> {
        self.external_id.as_deref()
    }

    /// Next representable id after this one, keeping the external id.
    pub(crate) fn bumped(&self) -> Self {
        Self {
            generated_at: self.generated_at + chrono::Duration::microseconds(1),
            external_id: self.external_id.clone(),
        }
    }

    /// Whether `selector` names this instance by canonical id or external id.
    pub fn matches(&self, selector: &str) -> bool {
        self.external_id.as_deref() == Some(selector) || self.to_string() == selector
    }
}

pub(crate) fn validate_external_id(ext: &str) -> crate::Result<()> {
    let ok =
        !ext.is_empty() && ext.len() <= 128 && ext.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(crate::Error::InvalidName(format!("external id {ext:?}")))
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.generated_at.format(TIMESTAMP_FORMAT))?;
        if let Some(ext) = &self.external_id {
            write!(f, "_{ext}")?;
        }
        Ok(())
    }
}

impl FromStr for InstanceId {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        let bad = || crate::Error::InvalidName(format!("instance id {s:?}"));
        if s.len() < TIMESTAMP_LEN || !s.is_char_boundary(TIMESTAMP_LEN) {
            return Err(bad());
        }
        let (ts, rest) = s.split_at(TIMESTAMP_LEN);
        let naive = NaiveDateTime::parse_from_str(ts, TIMESTAMP_FORMAT).map_err(|_| bad())?;
        let external_id = match rest {
            "" => None,
            r => Some(r.strip_prefix('_').ok_or_else(bad)?.to_string()),
        };
        let id = InstanceId::new(Utc.from_utc_datetime(&naive), external_id)?;
        if id.to_string() != s {
            return Err(bad());
        }
        Ok(id)
    }
}

impl Ord for InstanceId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

impl PartialOrd for InstanceId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for InstanceId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for InstanceId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Unique identifier of one logged operation: `op-<timestamp>-<random hex>`.
///
/// Read sessions use the `rd-` prefix; they hold locks but are never logged.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpId(String);

impl OpId {
    pub fn generate() -> Self {
        Self::with_prefix("op")
    }

    pub(crate) fn read_session() -> Self {
        Self::with_prefix("rd")
    }

    fn with_prefix(prefix: &str) -> Self {
        let ts = Utc::now().format(TIMESTAMP_FORMAT);
        Self(format!("{prefix}-{ts}-{:016x}", rand::random::<u64>()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_read_session(&self) -> bool {
        self.0.starts_with("rd-")
    }

    /// Key ordering operations by start time; larger is younger.
    pub(crate) fn age_key(&self) -> &str {
        self.0.split_once('-').map(|(_, rest)| rest).unwrap_or(&self.0)
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for OpId {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        let ok = !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if ok {
            Ok(Self(s.to_string()))
        } else {
            Err(crate::Error::InvalidName(format!("op id {s:?}")))
        }
    }
}

/// Table and column names: ASCII letters, digits, `_` and `-`, not starting
/// with a digit or `-`.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_encoding() {
        let t = Utc.with_ymd_and_hms(2024, 3, 5, 7, 8, 9).unwrap();
        let id = InstanceId::new(t, Some("v1".into())).unwrap();
        assert_eq!(id.to_string(), "20240305T070809.000000_v1");
        assert_eq!(id.to_string().parse::<InstanceId>().unwrap(), id);
        assert!(id.matches("v1"));
        assert!(id.matches("20240305T070809.000000_v1"));
        assert!(!id.matches("20240305T070809.000000"));
    }

    #[test]
    fn rejects_bad_ids() {
        assert!("2024".parse::<InstanceId>().is_err());
        assert!("20240305T070809.000000x".parse::<InstanceId>().is_err());
        assert!(InstanceId::now(Some("a/b".into())).is_err());
    }

    #[test]
    fn names() {
        assert!(is_valid_name("question-1"));
        assert!(is_valid_name("_x"));
        assert!(!is_valid_name("1abc"));
        assert!(!is_valid_name("a.b"));
        assert!(!is_valid_name(""));
    }

    proptest! {
        #[test]
        fn lexicographic_is_temporal(a in 0i64..4_000_000_000_000_000, b in 0i64..4_000_000_000_000_000) {
            let ia = InstanceId::new(DateTime::from_timestamp_micros(a).unwrap(), None).unwrap();
            let ib = InstanceId::new(DateTime::from_timestamp_micros(b).unwrap(), None).unwrap();
            prop_assert_eq!(ia.to_string().cmp(&ib.to_string()), a.cmp(&b));
            prop_assert_eq!(ia.to_string().parse::<InstanceId>().unwrap(), ia);
        }
    }
}
