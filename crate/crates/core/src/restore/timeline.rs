use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lane {
    Io,
    Compute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    FetchHidden,
    FetchKv,
    Project,
    Recompute,
}

impl EventKind {
    pub fn lane(self) -> Lane {
        match self {
            EventKind::FetchHidden | EventKind::FetchKv => Lane::Io,
            EventKind::Project | EventKind::Recompute => Lane::Compute,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::FetchHidden => "fetch_hidden",
            EventKind::FetchKv => "fetch_kv",
            EventKind::Project => "project",
            EventKind::Recompute => "recompute",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub lane: Lane,
    pub layer: usize,
    pub kind: EventKind,
    pub start_s: f64,
    pub end_s: f64,
}

impl Event {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Per-lane event trace of one restore.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Timeline {
    pub events: Vec<Event>,
}

impl Timeline {
    pub fn push(&mut self, layer: usize, kind: EventKind, start_s: f64, end_s: f64) {
        self.events.push(Event { lane: kind.lane(), layer, kind, start_s, end_s });
    }

    pub fn lane(&self, lane: Lane) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.lane == lane)
    }

    pub fn total_s(&self) -> f64 {
        self.events.iter().map(|e| e.end_s).fold(0.0, f64::max)
    }

    pub fn busy_s(&self, lane: Lane) -> f64 {
        self.lane(lane).map(Event::duration).sum()
    }

    pub fn lane_end_s(&self, lane: Lane) -> f64 {
        self.lane(lane).map(|e| e.end_s).fold(0.0, f64::max)
    }

    /// Idle time of a lane between zero and the end of the timeline.
    pub fn bubble_s(&self, lane: Lane) -> f64 {
        (self.total_s() - self.busy_s(lane)).max(0.0)
    }

    /// Checks that lane events do not overlap and each projection starts after
    /// its fetch ends. Returns the first violation.
    pub fn validate(&self) -> Result<(), String> {
        for lane in [Lane::Io, Lane::Compute] {
            let mut evs: Vec<&Event> = self.lane(lane).collect();
            evs.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            for w in evs.windows(2) {
                if w[1].start_s < w[0].end_s - 1e-12 {
                    return Err(format!("{lane:?} events overlap: {:?} and {:?}", w[0], w[1]));
                }
            }
        }
        for p in self.events.iter().filter(|e| e.kind == EventKind::Project) {
            let fetched = self
                .events
                .iter()
                .find(|f| f.kind == EventKind::FetchHidden && f.layer == p.layer)
                .ok_or_else(|| format!("layer {} projected without a fetch", p.layer))?;
            if p.start_s < fetched.end_s - 1e-12 {
                return Err(format!("layer {} projected before its fetch ended", p.layer));
            }
        }
        Ok(())
    }

    /// One line per event: `lane,layer,kind,start_s,end_s`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lane,layer,kind,start_s,end_s\n");
        for e in &self.events {
            let lane = match e.lane {
                Lane::Io => "io",
                Lane::Compute => "compute",
            };
            let _ = writeln!(s, "{lane},{},{},{:.9},{:.9}", e.layer, e.kind.as_str(), e.start_s, e.end_s);
        }
        s
    }
}

/// Idle share of the less busy lane, over the whole restore time, counted
/// only inside the steady-state window. The window excludes the fill stage
/// (compute cannot start before the first fetch lands) and the drain stage
/// (the last projection after IO has finished).
pub fn bubble_fraction(t: &Timeline) -> f64 {
    let total = t.total_s();
    if total <= 0.0 {
        return 0.0;
    }
    let (busy_io, busy_c) = (t.busy_s(Lane::Io), t.busy_s(Lane::Compute));
    let idle_lane = if busy_io >= busy_c { Lane::Compute } else { Lane::Io };
    let has_compute = t.lane(Lane::Compute).next().is_some();
    let has_io = t.lane(Lane::Io).next().is_some();
    let (fill, drain) = if has_compute && has_io {
        let first_compute = t.lane(Lane::Compute).map(|e| e.start_s).fold(f64::INFINITY, f64::min);
        let first_io = t
            .lane(Lane::Io)
            .min_by(|a, b| a.start_s.total_cmp(&b.start_s))
            .map_or(0.0, Event::duration);
        let last_compute = t
            .lane(Lane::Compute)
            .max_by(|a, b| a.end_s.total_cmp(&b.end_s))
            .map_or(0.0, Event::duration);
        (first_compute.min(first_io), (total - t.lane_end_s(Lane::Io)).min(last_compute))
    } else {
        (0.0, 0.0)
    };
    let (lo, hi) = (fill, (total - drain).max(fill));
    let busy_in_window: f64 = t
        .lane(idle_lane)
        .map(|e| (e.end_s.min(hi) - e.start_s.max(lo)).max(0.0))
        .sum();
    (((hi - lo) - busy_in_window) / total).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pipeline(n: usize, io: f64, c: f64) -> Timeline {
        let mut t = Timeline::default();
        let mut free = 0.0f64;
        for l in 0..n {
            let fetched = (l + 1) as f64 * io;
            t.push(l, EventKind::FetchHidden, l as f64 * io, fetched);
            let s = free.max(fetched);
            t.push(l, EventKind::Project, s, s + c);
            free = s + c;
        }
        t
    }

    #[test]
    fn equal_lanes_have_no_bubble() {
        let t = pipeline(8, 1.0, 1.0);
        assert_eq!(t.total_s(), 9.0);
        assert_eq!(bubble_fraction(&t), 0.0);
        t.validate().unwrap();
    }

    #[test]
    fn kv_only_leaves_compute_idle() {
        let mut t = Timeline::default();
        for l in 0..4 {
            t.push(l, EventKind::FetchKv, l as f64, l as f64 + 1.0);
        }
        assert_eq!(bubble_fraction(&t), 1.0);
    }

    #[test]
    fn io_twice_compute_idles_compute_half_the_time() {
        // window [2c, 2Nc], compute busy (N-1)c inside it, total (2N+1)c
        let n = 100;
        let t = pipeline(n, 2.0, 1.0);
        let want = (n - 1) as f64 / (2 * n + 1) as f64;
        assert!((bubble_fraction(&t) - want).abs() < 1e-12);
        assert!((bubble_fraction(&t) - 0.5).abs() < 0.01);
    }

    #[test]
    fn validation_catches_overlap_and_early_projection() {
        let mut t = pipeline(2, 1.0, 1.0);
        t.push(5, EventKind::FetchKv, 0.5, 1.5);
        assert!(t.validate().is_err());
        let mut t = Timeline::default();
        t.push(0, EventKind::FetchHidden, 0.0, 1.0);
        t.push(0, EventKind::Project, 0.5, 1.5);
        assert!(t.validate().is_err());
    }

    #[test]
    fn csv_has_one_line_per_event() {
        let t = pipeline(3, 1.0, 1.0);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(2).unwrap().starts_with("compute,0,project,1.0"));
    }
}
