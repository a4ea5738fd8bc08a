//! Link-layer framing with FRAG1/FRAGN style fragmentation.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::NetsimError;
use crate::coap::reliability::secs_f64;

/// Largest datagram the 11-bit fragment size field can describe.
pub const MAX_FRAGMENTED: usize = 2047;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkProfile {
    Ieee802154,
    Lorawan,
}

impl std::str::FromStr for LinkProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ieee802154" | "802.15.4" => Ok(LinkProfile::Ieee802154),
            "lorawan" => Ok(LinkProfile::Lorawan),
            _ => Err(format!("unknown link profile {s:?} (ieee802154|lorawan)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub mtu: usize,
    pub mac_header: usize,
    /// Compressed IPv6 and UDP headers carried in front of the payload.
    pub adaptation_header: usize,
    pub frag1_header: usize,
    pub fragn_header: usize,
    pub loss_prob: f64,
    /// Air time per frame.
    #[serde(with = "secs_f64")]
    pub latency: Duration,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel::profile(LinkProfile::Ieee802154)
    }
}

impl LinkModel {
    pub fn profile(profile: LinkProfile) -> Self {
        let base = LinkModel {
            mtu: 127,
            mac_header: 23,
            adaptation_header: 41,
            frag1_header: 4,
            fragn_header: 5,
            loss_prob: 0.05,
            latency: Duration::from_millis(10),
        };
        match profile {
            LinkProfile::Ieee802154 => base,
            LinkProfile::Lorawan => LinkModel { mtu: 59, mac_header: 13, adaptation_header: 2, ..base },
        }
    }

    pub fn lossless(mut self) -> Self {
        self.loss_prob = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(NetsimError::Config(format!("loss_prob {} outside [0, 1]", self.loss_prob)));
        }
        if self.first_capacity() == 0 || self.later_capacity() == 0 {
            return Err(NetsimError::Config(format!(
                "mtu {} leaves no fragment payload after {}+{} header octets",
                self.mtu,
                self.mac_header,
                self.frag1_header.max(self.fragn_header)
            )));
        }
        Ok(())
    }

    /// Payload octets of the first fragment, including the adaptation header.
    pub fn first_capacity(&self) -> usize {
        floor8(self.mtu.saturating_sub(self.mac_header + self.frag1_header))
    }

    /// Payload octets of each subsequent fragment.
    pub fn later_capacity(&self) -> usize {
        floor8(self.mtu.saturating_sub(self.mac_header + self.fragn_header))
    }

    /// Frame sizes needed to carry a `payload`-octet datagram.
    pub fn fragment(&self, payload: usize) -> Result<Vec<usize>, NetsimError> {
        if payload == 0 {
            return Err(NetsimError::Config("empty datagram".into()));
        }
        self.validate()?;
        let unit = self.adaptation_header + payload;
        if unit > MAX_FRAGMENTED {
            return Err(NetsimError::Config(format!("{unit}-octet datagram exceeds {MAX_FRAGMENTED}")));
        }
        if self.mac_header + unit <= self.mtu {
            return Ok(vec![self.mac_header + unit]);
        }
        let first = self.first_capacity();
        let later = self.later_capacity();
        let mut frames = vec![self.mac_header + self.frag1_header + first];
        let mut left = unit - first;
        while left > 0 {
            let n = left.min(later);
            frames.push(self.mac_header + self.fragn_header + n);
            left -= n;
        }
        Ok(frames)
    }

    /// Datagram octets carried by `frames`, the inverse of [`fragment`](Self::fragment).
    pub fn carried(&self, frames: &[usize]) -> usize {
        match frames {
            [] => 0,
            [one] => one - self.mac_header - self.adaptation_header,
            [first, rest @ ..] => {
                first - self.mac_header - self.frag1_header
                    + rest.iter().map(|f| f - self.mac_header - self.fragn_header).sum::<usize>()
                    - self.adaptation_header
            }
        }
    }
}

fn floor8(n: usize) -> usize {
    n & !7
}
