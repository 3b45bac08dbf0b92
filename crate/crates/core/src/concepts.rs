//! Ground-truth concept metrics from scored events, and a simple
//! desaturation detector.

use crate::error::{invalid, Result};
use crate::signal::{ConceptVector, EventKind, OximetrySignal, RespiratoryEvent};

/// Hypopneas count only above this airflow reduction (strictly).
pub const HYPOPNEA_FLOW_PCT: f64 = 30.0;
/// Trailing window for the desaturation baseline, in valid samples.
pub const BASELINE_WINDOW_S: usize = 120;

fn hypopnea(e: &RespiratoryEvent) -> bool {
    e.kind == EventKind::Hypopnea && e.flow_reduction_pct > HYPOPNEA_FLOW_PCT
}

/// Per-event contribution to each rate concept (1 if counted), in
/// [`ConceptVector`] order with the saturation slots left at 0.
pub fn event_counts(e: &RespiratoryEvent) -> [u32; 10] {
    let apnea = e.kind.is_apnea();
    let central = e.kind == EventKind::CentralApnea;
    let h = hypopnea(e);
    let d = e.desat_pct;
    let rdi = |x: f64| (apnea || h) && d >= x;
    let c = [
        apnea || (h && d >= 4.0),
        apnea || (h && (d >= 4.0 || e.arousal)),
        central || (h && d >= 3.0),
        central || (h && (d >= 4.0 || e.arousal)),
        false,
        false,
        apnea || h,
        rdi(2.0),
        rdi(3.0),
        rdi(4.0),
    ];
    c.map(u32::from)
}

/// avgsat and minsat over valid samples in the first `tst_h` hours.
pub fn saturation_stats(signal: &OximetrySignal, total_sleep_time_h: f64) -> Result<(f64, f64)> {
    let end = ((total_sleep_time_h * 3600.0).round() as usize).min(signal.len());
    let (mut sum, mut n, mut min) = (0.0, 0usize, f64::INFINITY);
    for i in 0..end {
        if signal.is_valid(i) {
            let v = signal.samples()[i];
            sum += v;
            n += 1;
            min = min.min(v);
        }
    }
    if n == 0 {
        return Err(invalid("no valid samples within the sleep period"));
    }
    Ok((sum / n as f64, min))
}

pub fn compute_concepts(
    events: &[RespiratoryEvent],
    signal: &OximetrySignal,
    total_sleep_time_h: f64,
) -> Result<ConceptVector> {
    if !(total_sleep_time_h > 0.0) {
        return Err(invalid(format!("total sleep time must be positive, got {total_sleep_time_h}")));
    }
    let mut counts = [0u32; 10];
    for e in events {
        for (c, v) in counts.iter_mut().zip(event_counts(e)) {
            *c += v;
        }
    }
    let mut v = counts.map(|c| c as f64 / total_sleep_time_h);
    let (avg, min) = saturation_stats(signal, total_sleep_time_h)?;
    v[4] = avg;
    v[5] = min;
    ConceptVector::from_slice(&v)
}

/// Trailing median over the last `cap` values pushed.
struct RollingMedian {
    cap: usize,
    order: std::collections::VecDeque<f64>,
    sorted: Vec<f64>,
}

impl RollingMedian {
    fn new(cap: usize) -> Self {
        RollingMedian { cap, order: Default::default(), sorted: Vec::with_capacity(cap + 1) }
    }

    fn push(&mut self, v: f64) {
        let at = self.sorted.partition_point(|&x| x < v);
        self.sorted.insert(at, v);
        self.order.push_back(v);
        if self.order.len() > self.cap {
            let old = self.order.pop_front().expect("non-empty");
            let at = self.sorted.partition_point(|&x| x < old);
            self.sorted.remove(at);
        }
    }

    fn full(&self) -> bool {
        self.order.len() == self.cap
    }

    fn median(&self) -> f64 {
        let n = self.sorted.len();
        if n % 2 == 1 {
            self.sorted[n / 2]
        } else {
            0.5 * (self.sorted[n / 2 - 1] + self.sorted[n / 2])
        }
    }
}

/// Emits one `Desaturation` event per maximal span in which the signal sits
/// at least `min_drop_pct` below the baseline taken at the span's first
/// sample, lasting at least `min_duration_s`. The baseline is the median of
/// the preceding 120 valid samples; no span starts before 120 valid samples
/// have been seen. Invalid samples end a span.
pub fn detect_desaturations(
    signal: &OximetrySignal,
    min_drop_pct: f64,
    min_duration_s: f64,
) -> Result<Vec<RespiratoryEvent>> {
    if signal.len() < BASELINE_WINDOW_S {
        return Err(invalid(format!(
            "signal of {} s is shorter than the {BASELINE_WINDOW_S} s baseline window",
            signal.len()
        )));
    }
    const TOL: f64 = 1e-9;
    let x = signal.samples();
    let mut window = RollingMedian::new(BASELINE_WINDOW_S);
    let mut events = Vec::new();
    // (start, baseline, minimum)
    let mut span: Option<(usize, f64, f64)> = None;
    let close = |span: (usize, f64, f64), end: usize, events: &mut Vec<RespiratoryEvent>| {
        let len = (end - span.0) as f64;
        if len >= min_duration_s {
            events.push(RespiratoryEvent {
                kind: EventKind::Desaturation,
                start_s: span.0 as f64,
                duration_s: len,
                flow_reduction_pct: 0.0,
                desat_pct: span.1 - span.2,
                arousal: false,
            });
        }
    };
    for i in 0..x.len() {
        if !signal.is_valid(i) {
            if let Some(s) = span.take() {
                close(s, i, &mut events);
            }
            continue;
        }
        let v = x[i];
        if let Some((start, b0, lo)) = span {
            if b0 - v >= min_drop_pct - TOL {
                span = Some((start, b0, lo.min(v)));
            } else {
                close((start, b0, lo), i, &mut events);
                span = None;
            }
        }
        if span.is_none() && window.full() {
            let b = window.median();
            if b - v >= min_drop_pct - TOL {
                span = Some((i, b, v));
            }
        }
        window.push(v);
    }
    if let Some(s) = span {
        close(s, x.len(), &mut events);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, flow: f64, desat: f64, arousal: bool) -> RespiratoryEvent {
        RespiratoryEvent { kind, start_s: 0.0, duration_s: 10.0, flow_reduction_pct: flow, desat_pct: desat, arousal }
    }

    fn flat(n: usize) -> OximetrySignal {
        OximetrySignal::from_clean(vec![95.0; n]).unwrap()
    }

    #[test]
    fn obstructive_only() {
        let events = vec![ev(EventKind::ObstructiveApnea, 100.0, 0.0, false); 7];
        let c = compute_concepts(&events, &flat(3600 * 4), 3.5).unwrap();
        assert_eq!(c.ahi_a0h4, 2.0);
        assert_eq!(c.ahi_c0h3, 0.0);
        assert_eq!(c.rdi0p, 2.0);
        assert_eq!(c.rdi2p, 0.0);
    }

    #[test]
    fn hypopneas_straddling_three_and_four() {
        let events = vec![ev(EventKind::Hypopnea, 35.0, 3.0, false); 6];
        let c = compute_concepts(&events, &flat(3600 * 6), 6.0).unwrap();
        assert_eq!(c.ahi_a0h4, 0.0);
        assert_eq!(c.ahi_c0h3, 1.0);
        assert_eq!(c.rdi3p, 1.0);
        assert_eq!(c.rdi4p, 0.0);
    }

    #[test]
    fn no_events() {
        let mut v = vec![95.0; 7200];
        v[100] = 88.0;
        let s = OximetrySignal::from_clean(v).unwrap();
        let c = compute_concepts(&[], &s, 2.0).unwrap();
        assert!(c.to_array().iter().enumerate().all(|(i, &x)| i == 4 || i == 5 || x == 0.0));
        assert_eq!(c.minsat, 88.0);
        assert!((c.avgsat - (95.0 - 7.0 / 7200.0)).abs() < 1e-12);
    }

    #[test]
    fn flow_threshold_is_strict_and_other_kinds_ignored() {
        let events = vec![
            ev(EventKind::Hypopnea, 30.0, 9.0, true),
            ev(EventKind::Desaturation, 0.0, 9.0, true),
            ev(EventKind::Artifact, 0.0, 9.0, true),
        ];
        let c = compute_concepts(&events, &flat(3600), 1.0).unwrap();
        assert!(c.to_array().iter().enumerate().all(|(i, &x)| i == 4 || i == 5 || x == 0.0));
    }

    #[test]
    fn non_positive_sleep_time_is_an_error() {
        assert!(compute_concepts(&[], &flat(10), 0.0).is_err());
    }

    #[test]
    fn saturation_ignores_invalid_and_time_after_sleep() {
        let mut v = vec![95.0; 7200];
        v[10] = f64::NAN;
        v[5000] = 60.0;
        let s = OximetrySignal::from_readings(&v);
        let (avg, min) = saturation_stats(&s, 1.0).unwrap();
        assert_eq!((avg, min), (95.0, 95.0));
    }

    fn dip(base: f64, low: f64, start: usize, len: usize, n: usize) -> OximetrySignal {
        let v = (0..n).map(|i| if (start..start + len).contains(&i) { low } else { base }).collect();
        OximetrySignal::from_clean(v).unwrap()
    }

    #[test]
    fn detector_examples() {
        assert!(detect_desaturations(&flat(1000), 4.0, 10.0).unwrap().is_empty());
        let d = detect_desaturations(&dip(95.0, 90.0, 300, 20, 1000), 4.0, 10.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].start_s, 300.0);
        assert_eq!(d[0].duration_s, 20.0);
        assert_eq!(d[0].desat_pct, 5.0);
        let shallow = dip(95.0, 93.0, 300, 20, 1000);
        assert!(detect_desaturations(&shallow, 4.0, 10.0).unwrap().is_empty());
        assert_eq!(detect_desaturations(&shallow, 2.0, 10.0).unwrap().len(), 1);
        assert!(detect_desaturations(&dip(95.0, 90.0, 300, 9, 1000), 4.0, 10.0).unwrap().is_empty());
        assert!(detect_desaturations(&flat(100), 4.0, 10.0).is_err());
    }

    #[test]
    fn rolling_median_matches_sort() {
        let mut m = RollingMedian::new(5);
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        for (i, &x) in xs.iter().enumerate() {
            m.push(x);
            let lo = i.saturating_sub(4);
            let mut w = xs[lo..=i].to_vec();
            w.sort_by(f64::total_cmp);
            let k = w.len();
            let med = if k % 2 == 1 { w[k / 2] } else { 0.5 * (w[k / 2 - 1] + w[k / 2]) };
            assert_eq!(m.median(), med);
        }
    }
}
