use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Pending,
    Running,
    Completed,
}

/// One LLM request. Its KV footprint is a function of the slot, see [`kv_size_at`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_slot: u64,
    pub prompt_tokens: u64,
    /// Total tokens the request will generate.
    pub response_tokens: u64,
    pub kv_bytes_per_token: u64,
    pub state: RequestState,
}

impl Request {
    pub fn new(
        id: u64,
        arrival_slot: u64,
        prompt_tokens: u64,
        response_tokens: u64,
        kv_bytes_per_token: u64,
    ) -> Result<Self> {
        if prompt_tokens == 0 || response_tokens == 0 || kv_bytes_per_token == 0 {
            return Err(Error::Precondition(format!(
                "request {id}: prompt, response and kv/token must all be positive"
            )));
        }
        Ok(Self {
            id: RequestId(id),
            arrival_slot,
            prompt_tokens,
            response_tokens,
            kv_bytes_per_token,
            state: RequestState::Pending,
        })
    }

    /// Tokens generated by the start of `slot`.
    pub fn generated_at(&self, slot: u64, tokens_per_slot: u64) -> u64 {
        let elapsed = slot.saturating_sub(self.arrival_slot);
        self.response_tokens
            .min(tokens_per_slot.saturating_mul(elapsed))
    }

    /// First slot at which every response token has been generated.
    pub fn completion_slot(&self, tokens_per_slot: u64) -> u64 {
        let rate = tokens_per_slot.max(1);
        self.arrival_slot + self.response_tokens.div_ceil(rate)
    }

    /// Footprint once generation has finished.
    pub fn peak_kv_bytes(&self) -> u64 {
        (self.prompt_tokens + self.response_tokens) * self.kv_bytes_per_token
    }

    /// Prompt plus generated tokens at `slot`, the cost of re-prefilling it elsewhere.
    pub fn processed_tokens(&self, slot: u64, tokens_per_slot: u64) -> u64 {
        self.prompt_tokens + self.generated_at(slot, tokens_per_slot)
    }

    pub fn advance(&mut self, next: RequestState) -> Result<()> {
        use RequestState::*;
        let ok = matches!(
            (self.state, next),
            (Pending, Running) | (Running, Completed) | (Pending, Completed)
        );
        if !ok {
            return Err(Error::Precondition(format!(
                "request {}: illegal transition {:?} -> {:?}",
                self.id, self.state, next
            )));
        }
        self.state = next;
        Ok(())
    }
}

/// KV-cache bytes held by `request` at `slot`: prompt plus generated tokens, grown
/// linearly at `tokens_per_slot` and capped once the response is complete.
pub fn kv_size_at(request: &Request, slot: u64, tokens_per_slot: u64) -> Result<u64> {
    if slot < request.arrival_slot {
        return Err(Error::Precondition(format!(
            "slot {slot} precedes arrival of {} at {}",
            request.id, request.arrival_slot
        )));
    }
    let tokens = request.prompt_tokens + request.generated_at(slot, tokens_per_slot);
    Ok(tokens * request.kv_bytes_per_token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> Request {
        Request::new(1, 5, 100, 50, 1).unwrap()
    }

    #[test]
    fn kv_growth_examples() {
        let r = req();
        assert_eq!(kv_size_at(&r, 5, 10).unwrap(), 100);
        assert_eq!(kv_size_at(&r, 8, 10).unwrap(), 130);
        assert_eq!(kv_size_at(&r, 105, 10).unwrap(), 150);
    }

    #[test]
    fn slot_before_arrival_is_rejected() {
        assert!(matches!(kv_size_at(&req(), 4, 10), Err(Error::Precondition(_))));
    }

    #[test]
    fn completion_slot_rounds_up() {
        let r = req();
        assert_eq!(r.completion_slot(10), 10);
        assert_eq!(r.completion_slot(7), 5 + 8);
        assert_eq!(kv_size_at(&r, r.completion_slot(7), 7).unwrap(), 150);
    }

    #[test]
    fn zero_lengths_are_rejected() {
        assert!(Request::new(1, 0, 0, 1, 1).is_err());
        assert!(Request::new(1, 0, 1, 0, 1).is_err());
        assert!(Request::new(1, 0, 1, 1, 0).is_err());
    }

    #[test]
    fn state_machine_is_forward_only() {
        let mut r = req();
        r.advance(RequestState::Running).unwrap();
        assert!(r.advance(RequestState::Pending).is_err());
        r.advance(RequestState::Completed).unwrap();
        assert!(r.advance(RequestState::Running).is_err());
    }

    proptest::proptest! {
        #[test]
        fn growth_is_monotone(prompt in 1u64..500, resp in 1u64..500, rate in 1u64..50, a in 0u64..20, dt in 0u64..100) {
            let r = Request::new(0, a, prompt, resp, 3).unwrap();
            let s0 = kv_size_at(&r, a + dt, rate).unwrap();
            let s1 = kv_size_at(&r, a + dt + 1, rate).unwrap();
            proptest::prop_assert!(s1 >= s0);
            proptest::prop_assert!(s1 <= r.peak_kv_bytes());
        }
    }
}
