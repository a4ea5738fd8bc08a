use std::fmt;
use std::str::FromStr;

use super::DnsError;

/// Longest label allowed on the wire.
pub const MAX_LABEL_LEN: usize = 63;
/// Longest encoded name, including length octets and the root terminator.
pub const MAX_NAME_LEN: usize = 255;

/// A domain name as a sequence of labels. The root name has no labels.
#[derive(Clone, Debug, Default, Eq)]
pub struct DnsName {
    labels: Vec<Vec<u8>>,
}

impl DnsName {
    pub fn root() -> Self {
        DnsName { labels: Vec::new() }
    }

    pub fn from_labels<I, L>(labels: I) -> Result<Self, DnsError>
    where
        I: IntoIterator<Item = L>,
        L: Into<Vec<u8>>,
    {
        let labels: Vec<Vec<u8>> = labels.into_iter().map(Into::into).collect();
        for label in &labels {
            if label.is_empty() {
                return Err(DnsError::EmptyLabel);
            }
            if label.len() > MAX_LABEL_LEN {
                return Err(DnsError::LabelTooLong { offset: None, len: label.len() });
            }
        }
        let name = DnsName { labels };
        if name.wire_len() > MAX_NAME_LEN {
            return Err(DnsError::NameTooLong(name.wire_len()));
        }
        Ok(name)
    }

    pub fn labels(&self) -> &[Vec<u8>] {
        &self.labels
    }

    pub fn is_root(&self) -> bool {
        self.labels.is_empty()
    }

    /// Uncompressed wire length: one length octet per label, the label
    /// bytes, and the terminating zero.
    pub fn wire_len(&self) -> usize {
        self.labels.iter().map(|l| l.len() + 1).sum::<usize>() + 1
    }

    /// Length of the presentation form without a trailing dot. The root
    /// name has length 0.
    pub fn presentation_len(&self) -> usize {
        if self.labels.is_empty() {
            return 0;
        }
        self.labels.iter().map(Vec::len).sum::<usize>() + self.labels.len() - 1
    }

    pub(crate) fn write_uncompressed(&self, out: &mut Vec<u8>) {
        for label in &self.labels {
            out.push(label.len() as u8);
            out.extend_from_slice(label);
        }
        out.push(0);
    }

    /// Case-insensitive comparison, as DNS requires for names.
    pub fn eq_ignore_case(&self, other: &DnsName) -> bool {
        self.labels.len() == other.labels.len()
            && self
                .labels
                .iter()
                .zip(&other.labels)
                .all(|(a, b)| a.eq_ignore_ascii_case(b))
    }
}

impl PartialEq for DnsName {
    fn eq(&self, other: &Self) -> bool {
        self.eq_ignore_case(other)
    }
}

impl std::hash::Hash for DnsName {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        for label in &self.labels {
            state.write_usize(label.len());
            for b in label {
                state.write_u8(b.to_ascii_lowercase());
            }
        }
    }
}

impl FromStr for DnsName {
    type Err = DnsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.strip_suffix('.').unwrap_or(s);
        if trimmed.is_empty() {
            return Ok(DnsName::root());
        }
        DnsName::from_labels(trimmed.split('.').map(|l| l.as_bytes().to_vec()))
    }
}

impl fmt::Display for DnsName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.labels.is_empty() {
            return f.write_str(".");
        }
        for (i, label) in self.labels.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            for &b in label {
                if b.is_ascii_graphic() && b != b'.' && b != b'\\' {
                    write!(f, "{}", b as char)?;
                } else {
                    write!(f, "\\{:03}", b)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_measure() {
        let name: DnsName = "0123456789.abcdefghij.de".parse().unwrap();
        assert_eq!(name.labels().len(), 3);
        assert_eq!(name.presentation_len(), 24);
        assert_eq!(name.wire_len(), 26);
        assert_eq!(name.to_string(), "0123456789.abcdefghij.de");
    }

    #[test]
    fn root_forms() {
        let root: DnsName = ".".parse().unwrap();
        assert!(root.is_root());
        assert_eq!(root.wire_len(), 1);
        assert_eq!(root.presentation_len(), 0);
        assert_eq!(root.to_string(), ".");
        assert_eq!("".parse::<DnsName>().unwrap(), root);
    }

    #[test]
    fn trailing_dot_is_ignored() {
        let a: DnsName = "example.org.".parse().unwrap();
        let b: DnsName = "EXAMPLE.org".parse().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(matches!("a..b".parse::<DnsName>(), Err(DnsError::EmptyLabel)));
        let long = "x".repeat(64);
        assert!(matches!(long.parse::<DnsName>(), Err(DnsError::LabelTooLong { .. })));
        let too_long = vec!["a".repeat(63); 4].join(".");
        assert!(matches!(too_long.parse::<DnsName>(), Err(DnsError::NameTooLong(257))));
    }
}
