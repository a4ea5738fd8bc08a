//! Level-3 subset of RFC 6570 URI templates: `{var}`, `{?var,...}` and
//! `{&var,...}` expressions with string values.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("variable {0:?} is not bound")]
    Unbound(String),
    #[error("unterminated expression at offset {0}")]
    Unterminated(usize),
    #[error("unsupported operator {0:?}")]
    UnsupportedOperator(char),
    #[error("empty expression at offset {0}")]
    Empty(usize),
}

/// Result of expanding a template: a path and an optional query string,
/// both still percent-encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpandedUri {
    pub path: String,
    pub query: Option<String>,
}

impl ExpandedUri {
    /// Decoded path segments, one per Uri-Path option.
    pub fn path_segments(&self) -> Vec<Vec<u8>> {
        self.path.split('/').filter(|s| !s.is_empty()).map(percent_decode).collect()
    }

    /// Decoded `&`-separated query items, one per Uri-Query option.
    pub fn query_items(&self) -> Vec<Vec<u8>> {
        self.query
            .as_deref()
            .map(|q| q.split('&').filter(|s| !s.is_empty()).map(percent_decode).collect())
            .unwrap_or_default()
    }
}

fn is_unreserved(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~')
}

pub fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for &b in s.as_bytes() {
        if is_unreserved(b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Percent-encodes one decoded `name=value` query item.
pub fn percent_encode_query(item: &[u8]) -> String {
    let mut out = String::with_capacity(item.len());
    for &b in item {
        if is_unreserved(b) || b == b'=' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn percent_decode(s: &str) -> Vec<u8> {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'%' && i + 2 < b.len() {
            let hex = |c: u8| (c as char).to_digit(16);
            if let (Some(h), Some(l)) = (hex(b[i + 1]), hex(b[i + 2])) {
                out.push((h * 16 + l) as u8);
                i += 3;
                continue;
            }
        }
        out.push(b[i]);
        i += 1;
    }
    out
}

pub fn expand_template(template: &str, bindings: &BTreeMap<String, String>) -> Result<ExpandedUri, TemplateError> {
    let mut out = String::new();
    let mut rest = template;
    let mut offset = 0;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').ok_or(TemplateError::Unterminated(offset + open))? + open;
        let expr = &rest[open + 1..close];
        let (op, vars) = match expr.chars().next() {
            None => return Err(TemplateError::Empty(offset + open)),
            Some(c @ ('?' | '&')) => (Some(c), &expr[1..]),
            Some(c) if c.is_ascii_alphanumeric() || c == '_' => (None, expr),
            Some(c) => return Err(TemplateError::UnsupportedOperator(c)),
        };
        for (i, var) in vars.split(',').enumerate() {
            if var.is_empty() {
                return Err(TemplateError::Empty(offset + open));
            }
            let value = bindings.get(var).ok_or_else(|| TemplateError::Unbound(var.to_string()))?;
            match op {
                None => {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&percent_encode(value));
                }
                Some(first) => {
                    out.push(if i == 0 { first } else { '&' });
                    out.push_str(var);
                    out.push('=');
                    out.push_str(&percent_encode(value));
                }
            }
        }
        offset += close + 1;
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(match out.split_once('?') {
        Some((p, q)) => ExpandedUri { path: p.to_string(), query: Some(q.to_string()) },
        None => ExpandedUri { path: out, query: None },
    })
}

/// Names of all variables referenced by a template.
pub fn template_variables(template: &str) -> Vec<String> {
    let mut vars = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        let expr = rest[open + 1..open + close].trim_start_matches(['?', '&']);
        vars.extend(expr.split(',').filter(|v| !v.is_empty()).map(str::to_string));
        rest = &rest[open + close + 1..];
    }
    vars
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn form_query() {
        let e = expand_template("/dns{?dns}", &bind(&[("dns", "AAAA")])).unwrap();
        assert_eq!(e.path, "/dns");
        assert_eq!(e.query.as_deref(), Some("dns=AAAA"));
        assert_eq!(e.path_segments(), [b"dns".to_vec()]);
        assert_eq!(e.query_items(), [b"dns=AAAA".to_vec()]);
    }

    #[test]
    fn simple_string_is_percent_encoded() {
        let e = expand_template("/r/{v}", &bind(&[("v", "a b")])).unwrap();
        assert_eq!(e.path, "/r/a%20b");
        assert_eq!(e.query, None);
        assert_eq!(e.path_segments()[1], b"a b");
    }

    #[test]
    fn no_variables() {
        let e = expand_template("/dns", &BTreeMap::new()).unwrap();
        assert_eq!(e, ExpandedUri { path: "/dns".into(), query: None });
    }

    #[test]
    fn continuation_and_lists() {
        let e = expand_template("/q{?a,b}{&c}", &bind(&[("a", "1"), ("b", "x/y"), ("c", "~")])).unwrap();
        assert_eq!(e.query.as_deref(), Some("a=1&b=x%2Fy&c=~"));
        assert_eq!(template_variables("/q{?a,b}{&c}"), ["a", "b", "c"]);
    }

    #[test]
    fn errors() {
        assert_eq!(expand_template("/dns{?dns}", &BTreeMap::new()), Err(TemplateError::Unbound("dns".into())));
        assert_eq!(expand_template("/dns{?dns", &bind(&[("dns", "")])), Err(TemplateError::Unterminated(4)));
        assert_eq!(expand_template("/{+x}", &bind(&[("x", "")])), Err(TemplateError::UnsupportedOperator('+')));
        assert_eq!(expand_template("/{}", &BTreeMap::new()), Err(TemplateError::Empty(1)));
    }

    #[test]
    fn base64url_alphabet_is_untouched() {
        let v = "AAABAAAAAAAAABIwMTIzNDU2Nzg5-_";
        assert_eq!(percent_encode(v), v);
        assert_eq!(percent_decode("%41%zz%4"), b"A%zz%4");
    }
}
