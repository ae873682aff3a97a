//! Saturating mixer and conference rooms with N-1 mixes.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::{AudioFrame, FRAME_SAMPLES};

pub fn mix(frames: &[AudioFrame]) -> AudioFrame {
    let mut acc = [0i32; FRAME_SAMPLES];
    for f in frames {
        for (a, &s) in acc.iter_mut().zip(f.samples()) {
            *a += i32::from(s);
        }
    }
    let out: Vec<i16> = acc
        .iter()
        .map(|&v| v.clamp(i32::from(i16::MIN), i32::from(i16::MAX)) as i16)
        .collect();
    AudioFrame::from_slice(&out).expect("fixed length")
}

/// Frames older than this no longer count as a participant's voice.
const STALE_AFTER: Duration = Duration::from_millis(60);

/// A conference room keeps the most recent frame heard from each member.
#[derive(Debug, Default)]
pub struct Room {
    latest: BTreeMap<u64, Option<(Instant, AudioFrame)>>,
}

impl Room {
    pub fn join(&mut self, id: u64) {
        self.latest.entry(id).or_insert(None);
    }

    pub fn leave(&mut self, id: u64) {
        self.latest.remove(&id);
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.latest.contains_key(&id)
    }

    pub fn contribute(&mut self, id: u64, frame: AudioFrame, at: Instant) {
        if let Some(slot) = self.latest.get_mut(&id) {
            *slot = Some((at, frame));
        }
    }

    /// Mix of every other member's fresh audio.
    pub fn mix_for(&self, id: u64, now: Instant) -> AudioFrame {
        let others: Vec<AudioFrame> = self
            .latest
            .iter()
            .filter(|(k, _)| **k != id)
            .filter_map(|(_, v)| v.as_ref())
            .filter(|(t, _)| now.saturating_duration_since(*t) <= STALE_AFTER)
            .map(|(_, f)| f.clone())
            .collect();
        mix(&others)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_saturation() {
        let f = AudioFrame::constant(1234);
        assert_eq!(mix(std::slice::from_ref(&f)), f);
        assert_eq!(
            mix(&[AudioFrame::constant(16384), AudioFrame::constant(16383)]),
            AudioFrame::constant(32767)
        );
        assert_eq!(
            mix(&[AudioFrame::constant(30000), AudioFrame::constant(30000)]),
            AudioFrame::constant(32767)
        );
        assert_eq!(
            mix(&[AudioFrame::constant(-30000), AudioFrame::constant(-30000)]),
            AudioFrame::constant(-32768)
        );
    }

    #[test]
    fn n_minus_one() {
        let now = Instant::now();
        let mut room = Room::default();
        for id in 1..=3 {
            room.join(id);
            room.contribute(id, AudioFrame::constant(id as i16 * 100), now);
        }
        assert_eq!(room.mix_for(1, now), AudioFrame::constant(500));
        assert_eq!(room.mix_for(3, now), AudioFrame::constant(300));
        room.leave(2);
        assert_eq!(room.mix_for(1, now), AudioFrame::constant(300));

        let mut solo = Room::default();
        solo.join(1);
        solo.contribute(1, AudioFrame::constant(999), now);
        assert_eq!(solo.mix_for(1, now), AudioFrame::silence());
    }

    #[test]
    fn stale_frames_drop_out() {
        let t0 = Instant::now();
        let mut room = Room::default();
        room.join(1);
        room.join(2);
        room.contribute(2, AudioFrame::constant(50), t0);
        assert_eq!(room.mix_for(1, t0 + Duration::from_millis(100)), AudioFrame::silence());
    }

    proptest! {
        #[test]
        fn linear_below_clip(a in prop::collection::vec(-8192i16..=8192, 160), b in prop::collection::vec(-8192i16..=8192, 160)) {
            let m = mix(&[AudioFrame::from_slice(&a).unwrap(), AudioFrame::from_slice(&b).unwrap()]);
            for i in 0..160 {
                prop_assert_eq!(i32::from(m.samples()[i]), i32::from(a[i]) + i32::from(b[i]));
            }
        }
    }
}
