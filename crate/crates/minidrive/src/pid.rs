//! PID with a windowed integral: the I term averages the most recent errors
//! instead of accumulating forever, so windup decays on its own.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct Pid {
    kp: f64,
    ki: f64,
    kd: f64,
    window: usize,
    buf: VecDeque<f64>,
    prev: Option<f64>,
}

impl Pid {
    pub fn new(kp: f64, ki: f64, kd: f64, window: usize) -> Pid {
        Pid { kp, ki, kd, window, buf: VecDeque::with_capacity(window), prev: None }
    }

    pub fn step(&mut self, e: f64) -> f64 {
        if self.buf.len() == self.window {
            self.buf.pop_front();
        }
        self.buf.push_back(e);
        let integral = self.buf.iter().sum::<f64>() / self.buf.len() as f64;
        let deriv = match self.prev {
            Some(p) => e - p,
            None => 0.0,
        };
        self.prev = Some(e);
        self.kp * e + self.ki * integral + self.kd * deriv
    }

    pub fn reset(&mut self) {
        self.buf.clear();
        self.prev = None;
    }
}
