//! Trajectory CSV: one row per aircraft per logged instant.
//!
//! Columns: `episode,t,uav_id,role,x,y,psi,phi,v,reward`. `t = 0` is the initial
//! snapshot. The leader is `uav_id = 0`; follower `k` is `uav_id = k + 1`. The reward
//! column is empty for the leader and for `t = 0`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FlockError, Result};
use crate::evaluation::{csv_err, EpisodeLog, StepRecord};
use crate::kinematics::UavState;
use crate::scalar::Scalar;

pub const HEADER: [&str; 10] = ["episode", "t", "uav_id", "role", "x", "y", "psi", "phi", "v", "reward"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Leader,
    Follower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub t: usize,
    pub uav_id: usize,
    pub role: Role,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub phi: f64,
    pub v: f64,
    pub reward: Option<f64>,
}

impl TrajectoryRow {
    pub fn state(&self) -> UavState<f64> {
        UavState {
            x: self.x,
            y: self.y,
            psi: self.psi,
            phi: self.phi,
            v: self.v,
        }
    }
}

fn rows_for_step<T: Scalar>(episode: usize, t: usize, step: &StepRecord<T>, out: &mut Vec<TrajectoryRow>) {
    let row = |uav_id, role, s: &UavState<T>, reward: Option<f64>| TrajectoryRow {
        episode,
        t,
        uav_id,
        role,
        x: s.x.to_f64_lossy(),
        y: s.y.to_f64_lossy(),
        psi: s.psi.to_f64_lossy(),
        phi: s.phi.to_f64_lossy(),
        v: s.v.to_f64_lossy(),
        reward,
    };
    out.push(row(0, Role::Leader, &step.leader, None));
    for (k, (id, s)) in step.followers.iter().enumerate() {
        let reward = step.rewards.get(k).map(|r| r.to_f64_lossy());
        out.push(row(id + 1, Role::Follower, s, reward));
    }
}

/// Flattens episode logs into rows; `episode` numbers follow slice order.
pub fn rows_from_logs<T: Scalar>(logs: &[EpisodeLog<T>]) -> Vec<TrajectoryRow> {
    let mut out = Vec::new();
    for (e, log) in logs.iter().enumerate() {
        rows_for_step(e, 0, &log.initial, &mut out);
        for (i, step) in log.steps.iter().enumerate() {
            rows_for_step(e, i + 1, step, &mut out);
        }
    }
    out
}

pub fn write_rows<W: Write>(w: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(HEADER).map_err(csv_err)?;
    }
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Parses a trajectory CSV. Errors carry the 1-based line number.
pub fn read_rows<R: Read>(r: R) -> Result<Vec<TrajectoryRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(FlockError::Csv {
            line: 1,
            reason: format!("expected header {}, found {}", HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<TrajectoryRow>() {
        let row = rec.map_err(csv_err)?;
        if ![row.x, row.y, row.psi, row.phi, row.v].iter().all(|v| v.is_finite()) {
            return Err(FlockError::Csv {
                line: rows.len() as u64 + 2,
                reason: "non-finite state value".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Rebuilds per-step records (states and logged rewards) from rows, grouped by episode.
pub fn logs_from_rows(rows: &[TrajectoryRow]) -> Result<BTreeMap<usize, EpisodeLog<f64>>> {
    let mut grouped: BTreeMap<usize, BTreeMap<usize, Vec<&TrajectoryRow>>> = BTreeMap::new();
    for r in rows {
        grouped.entry(r.episode).or_default().entry(r.t).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (episode, steps) in grouped {
        let mut records = Vec::with_capacity(steps.len());
        for (t, rows) in steps {
            let leaders: Vec<_> = rows.iter().filter(|r| r.role == Role::Leader).collect();
            if leaders.len() != 1 {
                return Err(FlockError::Csv {
                    line: 0,
                    reason: format!("episode {episode} t {t}: expected one leader row, found {}", leaders.len()),
                });
            }
            let followers: Vec<&&TrajectoryRow> = rows.iter().filter(|r| r.role == Role::Follower).collect();
            let rewards: Vec<f64> = if t == 0 {
                Vec::new()
            } else {
                followers
                    .iter()
                    .map(|r| {
                        r.reward.ok_or_else(|| FlockError::Csv {
                            line: 0,
                            reason: format!("episode {episode} t {t}: follower {} has no reward", r.uav_id),
                        })
                    })
                    .collect::<Result<_>>()?
            };
            records.push(StepRecord::new(
                leaders[0].state(),
                followers.iter().map(|r| (r.uav_id - 1, r.state())).collect(),
                rewards,
            ));
        }
        let mut records = records.into_iter();
        let initial = records.next().expect("at least one step per episode");
        out.insert(
            episode,
            EpisodeLog {
                seed: 0,
                policy_id: String::new(),
                n: initial.followers.len(),
                initial,
                steps: records.collect(),
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log() -> EpisodeLog<f64> {
        let s = |x: f64| UavState::new(x, 2.0 * x, 0.1, 0.0, 15.0);
        let step = |k: f64, rewards: Vec<f64>| StepRecord::new(s(k), vec![(0, s(k + 50.0)), (1, s(k - 50.0))], rewards);
        EpisodeLog {
            seed: 1,
            policy_id: "p".into(),
            n: 2,
            initial: step(0.0, vec![]),
            steps: vec![step(1.0, vec![-1.5, -0.25]), step(2.0, vec![0.0, -3.0])],
        }
    }

    #[test]
    fn write_read_round_trip() {
        let rows = rows_from_logs(&[log()]);
        assert_eq!(rows.len(), 9);
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("episode,t,uav_id,role,x,y,psi,phi,v,reward\n"));
        assert!(text.lines().nth(1).unwrap().ends_with(",leader,0.0,0.0,0.1,0.0,15.0,"));
        assert_eq!(read_rows(&buf[..]).unwrap(), rows);
        let back = logs_from_rows(&rows).unwrap();
        assert_eq!(back[&0].steps, log().steps);
    }

    #[test]
    fn malformed_line_reported() {
        let text = "episode,t,uav_id,role,x,y,psi,phi,v,reward\n\
                    0,0,0,leader,0,0,0,0,15,\n\
                    0,0,1,follower,abc,0,0,0,15,\n";
        match read_rows(text.as_bytes()) {
            Err(FlockError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let bad_header = "episode,t,id\n0,0,0\n";
        assert!(matches!(read_rows(bad_header.as_bytes()), Err(FlockError::Csv { line: 1, .. })));
    }

    #[test]
    fn empty_file_has_header_only() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[]).unwrap();
        assert!(read_rows(&buf[..]).unwrap().is_empty());
    }
}
