//! Optional per-tick CSV trace: `t,intersection,phase,mode,lane,stopped,moving`.

use std::io::Write;

use super::{DetectorZone, SimState};

pub struct TraceLogger<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TraceLogger<W> {
    pub fn new(inner: W) -> csv::Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(["t", "intersection", "phase", "mode", "lane", "stopped", "moving"])?;
        Ok(Self { writer })
    }

    /// Appends one row per incoming lane of every intersection.
    pub fn record(&mut self, state: &SimState) -> csv::Result<()> {
        let net = state.net().clone();
        for (i, inter) in net.intersections.iter().enumerate() {
            let sig = state.signal(i).expect("intersection in range");
            for &lane in &inter.incoming_lane_ids {
                let r = state.detector_reading(lane, DetectorZone::StopLine);
                self.writer.write_record([
                    state.clock_s.to_string(),
                    inter.id.clone(),
                    inter.phase_set[sig.active_phase_id].id.clone(),
                    sig.mode.as_str().to_string(),
                    net.lanes[lane].id.clone(),
                    r.stopped_count.to_string(),
                    r.moving_count.to_string(),
                ])?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.writer.flush()?;
        self.writer.into_inner().map_err(|e| e.into_error())
    }
}
