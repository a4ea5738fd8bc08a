//! Absolute `coap://` and `coaps://` URIs as carried in Proxy-Uri.

use std::fmt;

use crate::doc::template::{percent_decode, percent_encode, percent_encode_query};

pub const DEFAULT_PORT: u16 = 5683;
pub const DEFAULT_SECURE_PORT: u16 = 5684;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CoapUri {
    pub scheme: String,
    pub host: String,
    pub port: Option<u16>,
    pub path: Vec<Vec<u8>>,
    pub query: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed URI: {0}")]
pub struct UriError(pub &'static str);

impl CoapUri {
    pub fn parse(s: &str) -> Result<Self, UriError> {
        let (scheme, rest) = s.split_once("://").ok_or(UriError("missing scheme"))?;
        let scheme = scheme.to_ascii_lowercase();
        if scheme != "coap" && scheme != "coaps" {
            return Err(UriError("scheme is not coap or coaps"));
        }
        if rest.contains('#') {
            return Err(UriError("fragment not allowed"));
        }
        let (authority, tail) = match rest.find(['/', '?']) {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, ""),
        };
        let (host, port) = if let Some(v6) = authority.strip_prefix('[') {
            let end = v6.find(']').ok_or(UriError("unterminated IPv6 literal"))?;
            let after = &v6[end + 1..];
            let port = match after.strip_prefix(':') {
                Some(p) => Some(p.parse().map_err(|_| UriError("bad port"))?),
                None if after.is_empty() => None,
                None => return Err(UriError("junk after IPv6 literal")),
            };
            (&v6[..end], port)
        } else {
            match authority.rsplit_once(':') {
                Some((h, p)) => (h, Some(p.parse().map_err(|_| UriError("bad port"))?)),
                None => (authority, None),
            }
        };
        if host.is_empty() {
            return Err(UriError("empty host"));
        }
        let (path, query) = match tail.split_once('?') {
            Some((p, q)) => (p, Some(q)),
            None => (tail, None),
        };
        Ok(CoapUri {
            scheme,
            host: String::from_utf8(percent_decode(host)).map_err(|_| UriError("host is not UTF-8"))?,
            port,
            path: path.split('/').filter(|s| !s.is_empty()).map(percent_decode).collect(),
            query: query
                .map(|q| q.split('&').filter(|s| !s.is_empty()).map(percent_decode).collect())
                .unwrap_or_default(),
        })
    }

    pub fn effective_port(&self) -> u16 {
        self.port.unwrap_or(if self.scheme == "coaps" { DEFAULT_SECURE_PORT } else { DEFAULT_PORT })
    }

    /// Scheme and authority only.
    pub fn origin(&self) -> String {
        let host = if self.host.contains(':') { format!("[{}]", self.host) } else { self.host.clone() };
        match self.port {
            Some(p) => format!("{}://{}:{}", self.scheme, host, p),
            None => format!("{}://{}", self.scheme, host),
        }
    }
}

impl fmt::Display for CoapUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.origin())?;
        for seg in &self.path {
            write!(f, "/{}", percent_encode(&String::from_utf8_lossy(seg)))?;
        }
        for (i, q) in self.query.iter().enumerate() {
            write!(f, "{}{}", if i == 0 { '?' } else { '&' }, percent_encode_query(q))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_forms() {
        let u = CoapUri::parse("coap://resolver/dns?dns=AAAB").unwrap();
        assert_eq!(u.host, "resolver");
        assert_eq!(u.port, None);
        assert_eq!(u.path, [b"dns".to_vec()]);
        assert_eq!(u.query, [b"dns=AAAB".to_vec()]);
        assert_eq!(u.to_string(), "coap://resolver/dns?dns=AAAB");
        let v = CoapUri::parse("coaps://[2001:db8::1]:7000").unwrap();
        assert_eq!((v.host.as_str(), v.effective_port()), ("2001:db8::1", 7000));
        assert_eq!(v.origin(), "coaps://[2001:db8::1]:7000");
        assert_eq!(CoapUri::parse("coap://h").unwrap().effective_port(), 5683);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["http://x/dns", "coap:/x", "coap://", "coap://h:port/", "coap://[::1/dns", "coap://h/#f"] {
            assert!(CoapUri::parse(bad).is_err(), "{bad}");
        }
    }
}
