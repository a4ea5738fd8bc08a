//! Confirmable-message retransmission with randomized exponential back-off.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransmissionParams {
    #[serde(with = "secs_f64")]
    pub ack_timeout: Duration,
    pub random_factor: f64,
    pub max_retransmit: u32,
}

impl Default for TransmissionParams {
    fn default() -> Self {
        TransmissionParams { ack_timeout: Duration::from_secs(2), random_factor: 1.5, max_retransmit: 4 }
    }
}

impl TransmissionParams {
    pub fn validate(&self) -> Result<(), String> {
        if !self.random_factor.is_finite() || self.random_factor < 1.0 {
            return Err(format!("random_factor must be >= 1, got {}", self.random_factor));
        }
        if self.ack_timeout.is_zero() {
            return Err("ack_timeout must be positive".into());
        }
        Ok(())
    }

    /// Initial timeout, uniform in `[ack_timeout, ack_timeout * random_factor)`.
    pub fn initial_timeout<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        if self.random_factor <= 1.0 {
            return self.ack_timeout;
        }
        self.ack_timeout.mul_f64(rng.gen_range(1.0..self.random_factor))
    }

    /// Time from first transmission to the last retransmission in the worst case.
    pub fn max_transmit_span(&self) -> Duration {
        self.ack_timeout.mul_f64(self.random_factor) * ((1u32 << self.max_retransmit) - 1)
    }

    /// Time from first transmission until the sender gives up, worst case.
    pub fn max_transmit_wait(&self) -> Duration {
        self.ack_timeout.mul_f64(self.random_factor) * ((2u32 << self.max_retransmit) - 1)
    }

    pub fn exchange_lifetime(&self) -> Duration {
        // MAX_TRANSMIT_SPAN + 2 * MAX_LATENCY (100 s) + PROCESSING_DELAY
        self.max_transmit_span() + Duration::from_secs(200) + self.ack_timeout
    }
}

/// Cumulative offsets of each retransmission after the initial transmission.
pub fn retransmission_schedule<R: Rng + ?Sized>(params: &TransmissionParams, rng: &mut R) -> Vec<Duration> {
    offsets_from(params.initial_timeout(rng), params.max_retransmit)
}

fn offsets_from(initial: Duration, max_retransmit: u32) -> Vec<Duration> {
    (1..=max_retransmit).map(|k| initial * ((1u32 << k) - 1)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExchangeEvent {
    Timeout,
    /// Acknowledgement or matching response.
    Ack,
    Reset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailCause {
    Timeout,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Retransmit(Vec<u8>),
    Fail(FailCause),
    Complete,
}

/// Reliability state of one outgoing confirmable message.
#[derive(Clone, Debug)]
pub struct ExchangeState {
    pub token: Vec<u8>,
    pub message_id: u16,
    datagram: Vec<u8>,
    started: Duration,
    timeout: Duration,
    deadline: Duration,
    retransmissions: u32,
    max_retransmit: u32,
    done: bool,
}

impl ExchangeState {
    pub fn new(
        token: Vec<u8>,
        message_id: u16,
        datagram: Vec<u8>,
        initial_timeout: Duration,
        max_retransmit: u32,
        now: Duration,
    ) -> Self {
        ExchangeState {
            token,
            message_id,
            datagram,
            started: now,
            timeout: initial_timeout,
            deadline: now + initial_timeout,
            retransmissions: 0,
            max_retransmit,
            done: false,
        }
    }

    pub fn datagram(&self) -> &[u8] {
        &self.datagram
    }

    /// Number of retransmissions sent so far.
    pub fn retransmissions(&self) -> u32 {
        self.retransmissions
    }

    pub fn started(&self) -> Duration {
        self.started
    }

    pub fn deadline(&self) -> Option<Duration> {
        (!self.done).then_some(self.deadline)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, event: ExchangeEvent, now: Duration) -> StepOutcome {
        if self.done {
            return StepOutcome::Continue;
        }
        match event {
            ExchangeEvent::Ack => {
                self.done = true;
                StepOutcome::Complete
            }
            ExchangeEvent::Reset => {
                self.done = true;
                StepOutcome::Fail(FailCause::Reset)
            }
            ExchangeEvent::Timeout if now < self.deadline => StepOutcome::Continue,
            ExchangeEvent::Timeout if self.retransmissions >= self.max_retransmit => {
                self.done = true;
                StepOutcome::Fail(FailCause::Timeout)
            }
            ExchangeEvent::Timeout => {
                self.retransmissions += 1;
                self.timeout *= 2;
                self.deadline += self.timeout;
                StepOutcome::Retransmit(self.datagram.clone())
            }
        }
    }
}

pub(crate) mod secs_f64 {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn secs(v: &[Duration]) -> Vec<f64> {
        v.iter().map(Duration::as_secs_f64).collect()
    }

    #[test]
    fn degenerate_randomness() {
        let p = TransmissionParams { random_factor: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(secs(&retransmission_schedule(&p, &mut rng)), [2.0, 6.0, 14.0, 30.0]);
        let none = TransmissionParams { max_retransmit: 0, ..p };
        assert!(retransmission_schedule(&none, &mut rng).is_empty());
    }

    #[test]
    fn envelope_holds_for_many_draws() {
        let p = TransmissionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            for (i, off) in retransmission_schedule(&p, &mut rng).iter().enumerate() {
                let m = ((1u64 << (i + 1)) - 1) as f64;
                let s = off.as_secs_f64();
                assert!(s >= 2.0 * m && s <= 3.0 * m, "attempt {} offset {s}", i + 1);
            }
        }
    }

    #[test]
    fn state_machine_matches_schedule() {
        let p = TransmissionParams { random_factor: 1.0, ..Default::default() };
        let dg = vec![1, 2, 3];
        let mut st = ExchangeState::new(vec![9], 5, dg.clone(), p.ack_timeout, p.max_retransmit, Duration::ZERO);
        let mut offsets = Vec::new();
        while let Some(d) = st.deadline() {
            assert_eq!(st.step(ExchangeEvent::Timeout, d - Duration::from_millis(1)), StepOutcome::Continue);
            match st.step(ExchangeEvent::Timeout, d) {
                StepOutcome::Retransmit(bytes) => {
                    assert_eq!(bytes, dg);
                    offsets.push(d.as_secs());
                }
                StepOutcome::Fail(FailCause::Timeout) => {
                    assert_eq!(d.as_secs(), 62);
                    break;
                }
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(offsets, [2, 6, 14, 30]);
        assert_eq!(st.retransmissions(), 4);
        assert!(st.is_done());
    }

    #[test]
    fn ack_and_reset() {
        let mut st = ExchangeState::new(vec![], 1, vec![0], Duration::from_secs(2), 4, Duration::ZERO);
        assert!(matches!(st.step(ExchangeEvent::Timeout, Duration::from_secs(2)), StepOutcome::Retransmit(_)));
        assert_eq!(st.step(ExchangeEvent::Ack, Duration::from_secs(3)), StepOutcome::Complete);
        assert_eq!(st.step(ExchangeEvent::Timeout, Duration::from_secs(100)), StepOutcome::Continue);
        let mut st = ExchangeState::new(vec![], 1, vec![0], Duration::from_secs(2), 4, Duration::ZERO);
        assert_eq!(st.step(ExchangeEvent::Reset, Duration::ZERO), StepOutcome::Fail(FailCause::Reset));
    }

    #[test]
    fn derived_timing() {
        let p = TransmissionParams::default();
        assert_eq!(p.max_transmit_span(), Duration::from_secs(45));
        assert_eq!(p.max_transmit_wait(), Duration::from_secs(93));
        assert_eq!(p.exchange_lifetime(), Duration::from_secs(247));
        assert!(TransmissionParams { random_factor: 0.5, ..p }.validate().is_err());
    }
}
