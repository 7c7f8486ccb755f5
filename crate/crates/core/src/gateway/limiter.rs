use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding in-flight provider requests.
#[derive(Debug)]
pub struct Limiter {
    capacity: usize,
    state: Mutex<State>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct State {
    in_flight: usize,
    peak: usize,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "limiter capacity must be positive");
        Self { capacity, state: Mutex::new(State::default()), freed: Condvar::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().unwrap();
        while state.in_flight >= self.capacity {
            state = self.freed.wait(state).unwrap();
        }
        state.in_flight += 1;
        state.peak = state.peak.max(state.in_flight);
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap().in_flight
    }

    /// Highest simultaneous admission count observed.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().peak
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().unwrap();
        state.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}
