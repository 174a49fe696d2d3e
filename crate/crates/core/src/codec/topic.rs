use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicKind {
    Name,
    Filter,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopicViolation {
    #[error("topic is empty")]
    Empty,
    #[error("topic exceeds 65535 bytes")]
    TooLong,
    #[error("topic contains U+0000")]
    NullCharacter,
    #[error("wildcard in topic name")]
    WildcardInName,
    #[error("'+' must occupy a whole level")]
    PartialSingleLevelWildcard,
    #[error("'#' must be the last level and occupy it entirely")]
    MisplacedMultiLevelWildcard,
}

/// Checks `s` against the MQTT topic rules for a name or a filter and reports
/// the first rule it breaks.
pub fn validate_topic(s: &str, kind: TopicKind) -> Result<(), TopicViolation> {
    if s.is_empty() {
        return Err(TopicViolation::Empty);
    }
    if s.len() > u16::MAX as usize {
        return Err(TopicViolation::TooLong);
    }
    if s.contains('\0') {
        return Err(TopicViolation::NullCharacter);
    }
    match kind {
        TopicKind::Name => {
            if s.contains(['+', '#']) {
                return Err(TopicViolation::WildcardInName);
            }
        }
        TopicKind::Filter => {
            let levels: Vec<&str> = s.split('/').collect();
            let last = levels.len() - 1;
            for (i, level) in levels.iter().enumerate() {
                if level.contains('+') && *level != "+" {
                    return Err(TopicViolation::PartialSingleLevelWildcard);
                }
                if level.contains('#') && (*level != "#" || i != last) {
                    return Err(TopicViolation::MisplacedMultiLevelWildcard);
                }
            }
        }
    }
    Ok(())
}

/// A validated topic name (no wildcards).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicName(String);

impl TopicName {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicViolation> {
        let s = s.into();
        validate_topic(&s, TopicKind::Name)?;
        Ok(TopicName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }
}

/// A validated subscription filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TopicFilter(String);

impl TopicFilter {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicViolation> {
        let s = s.into();
        validate_topic(&s, TopicKind::Filter)?;
        Ok(TopicFilter(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    /// Standard MQTT matching: `+` matches exactly one level, a trailing `#`
    /// matches the remaining levels including none.
    pub fn matches(&self, topic: &TopicName) -> bool {
        let mut filter = self.levels();
        let mut name = topic.levels();
        loop {
            match (filter.next(), name.next()) {
                (Some("#"), _) => return true,
                (Some("+"), Some(_)) => {}
                (Some(f), Some(n)) if f == n => {}
                (None, None) => return true,
                _ => return false,
            }
        }
    }
}

macro_rules! string_newtype {
    ($t:ty) => {
        impl TryFrom<String> for $t {
            type Error = TopicViolation;
            fn try_from(s: String) -> Result<Self, Self::Error> {
                <$t>::new(s)
            }
        }
        impl From<$t> for String {
            fn from(t: $t) -> String {
                t.0
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl std::str::FromStr for $t {
            type Err = TopicViolation;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                <$t>::new(s)
            }
        }
    };
}

string_newtype!(TopicName);
string_newtype!(TopicFilter);
