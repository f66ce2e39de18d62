//! File formats: trajectory, sample, log and metrics CSVs, gain and parameter TOML.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{Vector3, Vector4};
use thiserror::Error;

use crate::control::ControllerGains;
use crate::defaults::ParamSet;
use crate::planner::{PiecewiseTrajectory, PolySegment, Scenario};
use crate::se3::UnitQuaternion;
use crate::sim::{ChannelStats, ControlRow, MetricsReport, StateRow};

pub const FLIGHT_BASELINE_CSV: &str = include_str!("../data/flight_baseline.csv");

pub const STATE_HEADER: [&str; 17] = [
    "t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz", "fflap", "thrud", "thele",
];
pub const CONTROL_HEADER: [&str; 16] = [
    "t", "epx", "epy", "epz", "evx", "evy", "evz", "dpsi", "hpsi", "omegapsid", "gammayd", "fflapcmd", "thrudcmd",
    "thelecmd", "V1", "V2",
];
pub const SAMPLE_HEADER: [&str; 16] =
    ["t", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az", "jx", "jy", "jz", "sx", "sy", "sz"];
pub const METRICS_HEADER: [&str; 7] =
    ["case", "along_max", "along_rms", "cross_max", "cross_rms", "altitude_max", "altitude_rms"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

fn fmt(x: f64) -> String {
    x.to_string()
}

fn parse(field: &str, what: &str) -> Result<f64, IoError> {
    field.trim().parse().map_err(|_| IoError::Format(format!("cannot parse {what} from {field:?}")))
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<(), IoError> {
    let header = reader.headers()?;
    if header.len() < expected.len() || header.iter().zip(expected).any(|(a, b)| a.trim() != *b) {
        return Err(IoError::Format(format!("expected header {}, got {}", expected.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }
    Ok(())
}

/// Rows `seg,axis,c0..cN,T` with physical-time coefficients.
pub fn write_trajectory(traj: &PiecewiseTrajectory, out: impl Write) -> Result<(), IoError> {
    let n = traj.segments[0].order();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["seg".to_string(), "axis".to_string()];
    header.extend((0..=n).map(|i| format!("c{i}")));
    header.push("T".into());
    w.write_record(&header)?;
    for (s, seg) in traj.segments.iter().enumerate() {
        for (axis, coeffs) in ["x", "y", "z"].iter().zip(&seg.coeffs) {
            let mut row = vec![s.to_string(), axis.to_string()];
            row.extend(coeffs.iter().map(|c| fmt(*c)));
            row.push(fmt(seg.duration));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(input: impl Read) -> Result<PiecewiseTrajectory, IoError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let width = header.len();
    if width < 4 || &header[0] != "seg" || &header[1] != "axis" || &header[width - 1] != "T" {
        return Err(IoError::Format("trajectory header must be seg,axis,c0..cN,T".into()));
    }
    let mut segs: BTreeMap<usize, ([Option<Vec<f64>>; 3], f64)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let seg: usize = rec[0].trim().parse().map_err(|_| IoError::Format(format!("bad segment index {:?}", &rec[0])))?;
        let axis = match rec[1].trim() {
            "x" => 0,
            "y" => 1,
            "z" => 2,
            other => return Err(IoError::Format(format!("unknown axis {other:?}"))),
        };
        let coeffs = (2..width - 1).map(|i| parse(&rec[i], "coefficient")).collect::<Result<Vec<_>, _>>()?;
        let duration = parse(&rec[width - 1], "duration")?;
        let entry = segs.entry(seg).or_insert(([None, None, None], duration));
        entry.0[axis] = Some(coeffs);
        entry.1 = duration;
    }
    let mut segments = Vec::with_capacity(segs.len());
    for (i, (idx, (axes, duration))) in segs.into_iter().enumerate() {
        if idx != i {
            return Err(IoError::Format(format!("segment {i} missing")));
        }
        let [Some(x), Some(y), Some(z)] = axes else {
            return Err(IoError::Format(format!("segment {i} lacks an axis")));
        };
        segments.push(PolySegment::new([x, y, z], duration).map_err(|e| IoError::Format(e.to_string()))?);
    }
    PiecewiseTrajectory::new(segments).map_err(|e| IoError::Format(e.to_string()))
}

/// Samples position through snap at a fixed interval, end point included.
pub fn write_samples(traj: &PiecewiseTrajectory, interval: f64, out: impl Write) -> Result<(), IoError> {
    if !(interval > 0.0) {
        return Err(IoError::Format(format!("sample interval must be positive, got {interval}")));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLE_HEADER)?;
    let end = traj.duration();
    let steps = (end / interval).round() as usize;
    for k in 0..=steps {
        let t = (k as f64 * interval).min(end);
        let d = traj.derivatives(t, 5).map_err(|e| IoError::Format(e.to_string()))?;
        let mut row = vec![fmt(t)];
        row.extend(d.iter().flat_map(|v| v.iter().map(|x| fmt(*x))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_states(rows: &[StateRow], out: impl Write) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STATE_HEADER)?;
    for r in rows {
        let q = r.q.as_vector();
        let mut row = vec![fmt(r.t)];
        row.extend(r.p.iter().chain(r.v.iter()).chain(q.iter()).chain(r.omega.iter()).map(|x| fmt(*x)));
        row.extend([r.f_flap, r.theta_rud, r.theta_ele].map(fmt));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_states(input: impl Read) -> Result<Vec<StateRow>, IoError> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &STATE_HEADER)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x = (0..17).map(|i| parse(&rec[i], STATE_HEADER[i])).collect::<Result<Vec<_>, _>>()?;
        let q = UnitQuaternion::from_vector(Vector4::new(x[7], x[8], x[9], x[10]))
            .map_err(|e| IoError::Format(format!("row at t = {}: {e}", x[0])))?;
        rows.push(StateRow {
            t: x[0],
            p: Vector3::new(x[1], x[2], x[3]),
            v: Vector3::new(x[4], x[5], x[6]),
            q,
            omega: Vector3::new(x[11], x[12], x[13]),
            f_flap: x[14],
            theta_rud: x[15],
            theta_ele: x[16],
        });
    }
    Ok(rows)
}

pub fn write_controls(rows: &[ControlRow], out: impl Write) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CONTROL_HEADER)?;
    for r in rows {
        let mut row = vec![fmt(r.t)];
        row.extend(r.e_p.iter().chain(r.e_v.iter()).map(|x| fmt(*x)));
        row.extend(
            [r.delta_psi, r.h_psi, r.omega_psi_d, r.gamma_yd, r.f_flap_cmd, r.theta_rud_cmd, r.theta_ele_cmd, r.v1, r.v2]
                .map(fmt),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics rows, one per case.
pub fn write_metrics(rows: &[(String, MetricsReport)], out: impl Write) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for (name, m) in rows {
        let mut row = vec![name.clone()];
        for (_, c) in m.channels() {
            row.push(format!("{:.6}", c.max));
            row.push(format!("{:.6}", c.rms));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(input: impl Read) -> Result<Vec<(String, MetricsReport)>, IoError> {
    let mut r = csv::Reader::from_reader(input);
    check_header(&mut r, &METRICS_HEADER)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let x = (1..7).map(|i| parse(&rec[i], METRICS_HEADER[i])).collect::<Result<Vec<_>, _>>()?;
        let c = |i: usize| ChannelStats { max: x[2 * i], rms: x[2 * i + 1] };
        rows.push((
            rec[0].trim().to_string(),
            MetricsReport { along_track: c(0), cross_track: c(1), altitude: c(2), samples: 0 },
        ));
    }
    Ok(rows)
}

/// Real-flight reference errors shipped for comparison.
pub fn flight_baseline() -> Vec<(String, MetricsReport)> {
    read_metrics(FLIGHT_BASELINE_CSV.as_bytes()).expect("bundled baseline is valid")
}

/// Multi-line text summary of metrics rows.
pub fn metrics_summary(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::new();
    for (name, m) in rows {
        s.push_str(&format!("case {name} ({} samples)\n", m.samples));
        for (channel, c) in m.channels() {
            s.push_str(&format!("  {channel:<12} max {:.4} m  rms {:.4} m\n", c.max, c.rms));
        }
    }
    s
}

pub fn read_gains(text: &str) -> Result<ControllerGains, IoError> {
    let gains: ControllerGains = toml::from_str(text)?;
    gains.validate().map_err(|e| IoError::Format(e.to_string()))?;
    Ok(gains)
}

pub fn write_gains(gains: &ControllerGains) -> Result<String, IoError> {
    Ok(toml::to_string(gains)?)
}

pub fn read_params(text: &str) -> Result<ParamSet, IoError> {
    let set: ParamSet = toml::from_str(text)?;
    set.full.validate().map_err(|e| IoError::Format(e.to_string()))?;
    set.vertical.validate().map_err(|e| IoError::Format(e.to_string()))?;
    Ok(set)
}

pub fn read_scenario(text: &str) -> Result<Scenario, IoError> {
    let scenario: Scenario = toml::from_str(text)?;
    scenario.constraints.validate().map_err(|e| IoError::Format(e.to_string()))?;
    Ok(scenario)
}

pub fn write_scenario(scenario: &Scenario) -> Result<String, IoError> {
    Ok(toml::to_string(scenario)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::case_library;

    fn sample_traj() -> PiecewiseTrajectory {
        let seg = |o: f64| PolySegment::new([vec![o, 1.0, 0.5], vec![0.0, -0.25, 0.0], vec![1.0, 0.0, 0.125]], 1.5).unwrap();
        PiecewiseTrajectory::new(vec![seg(0.0), seg(1.5)]).unwrap()
    }

    #[test]
    fn trajectory_round_trip() {
        let traj = sample_traj();
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("seg,axis,c0,c1,c2,T\n"));
        assert_eq!(read_trajectory(buf.as_slice()).unwrap(), traj);
    }

    #[test]
    fn malformed_trajectory_is_rejected() {
        assert!(read_trajectory("seg,axis,c0,T\n0,x,1,1\n".as_bytes()).is_err());
        assert!(read_trajectory("seg,axis,c0,T\n0,w,1,1\n".as_bytes()).is_err());
        assert!(read_trajectory("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn samples_have_expected_shape() {
        let mut buf = Vec::new();
        write_samples(&sample_traj(), 0.5, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], SAMPLE_HEADER.join(","));
        assert_eq!(lines.len(), 1 + 7);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 16));
    }

    #[test]
    fn state_round_trip() {
        let row = StateRow {
            t: 0.25,
            p: Vector3::new(1.0, 2.0, 3.0),
            v: Vector3::new(-0.5, 0.25, 0.0),
            q: UnitQuaternion::from_yaw(0.3),
            omega: Vector3::new(0.1, 0.0, -0.2),
            f_flap: 14.5,
            theta_rud: 0.01,
            theta_ele: -0.02,
        };
        let mut buf = Vec::new();
        write_states(&[row, row], &mut buf).unwrap();
        let back = read_states(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].p, row.p);
        assert!((back[0].q.as_vector() - row.q.as_vector()).norm() < 1e-15);
    }

    #[test]
    fn baseline_matches_reference_rows() {
        let rows = flight_baseline();
        assert_eq!(rows.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["a", "b", "line"]);
        assert_eq!(rows[0].1.along_track.rms, 0.170);
        assert_eq!(rows[1].1.cross_track.max, 0.528);
        assert_eq!(rows[2].1.altitude.rms, 0.052);
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        assert_eq!(read_metrics(buf.as_slice()).unwrap()[1].1.altitude, rows[1].1.altitude);
    }

    #[test]
    fn gains_round_trip_and_defaults() {
        let g = ControllerGains::certified();
        assert_eq!(read_gains(&write_gains(&g).unwrap()).unwrap(), g);
        let mut text = write_gains(&g).unwrap();
        text = text.lines().filter(|l| !l.starts_with("gamma_y_max") && !l.starts_with("heading_reference")).collect::<Vec<_>>().join("\n");
        assert_eq!(read_gains(&text).unwrap(), g);
        assert!(read_gains(&write_gains(&ControllerGains { k_psi: -1.0, ..g }).unwrap()).is_err());
    }

    #[test]
    fn params_round_trip() {
        let set = read_params(crate::defaults::DEFAULT_PARAMS_TOML).unwrap();
        assert_eq!(set, crate::defaults::param_set());
    }

    #[test]
    fn scenarios_round_trip() {
        for name in crate::planner::CASE_NAMES {
            let scenario = case_library(name).unwrap();
            assert_eq!(read_scenario(&write_scenario(&scenario).unwrap()).unwrap(), scenario);
        }
    }
}
