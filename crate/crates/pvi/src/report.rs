//! File outputs: CSV trajectories and the key-value summary. Every real is
//! serialized with 17 significant digits so identical runs produce
//! byte-identical files and echoed values reparse exactly.

use crate::diagnostics::SummaryItem;
use std::io;
use std::path::Path;

pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy)]
pub struct ValueRow {
    pub tau: f64,
    pub node_x: f64,
    pub v: f64,
    pub vx: f64,
    pub vxx: f64,
    pub hjb_residual: f64,
}

pub fn write_values(path: &Path, rows: &[ValueRow]) -> io::Result<()> {
    let mut out = String::from("tau,node_x,v,vx,vxx,hjb_residual\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            real(r.tau),
            real(r.node_x),
            real(r.v),
            real(r.vx),
            real(r.vxx),
            real(r.hjb_residual)
        ));
    }
    std::fs::write(path, out)
}

pub fn read_values(path: &Path) -> io::Result<Vec<ValueRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let bad = |line: usize, why: &str| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}:{line}: {why}", path.display()),
        )
    };
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "tau,node_x,v,vx,vxx,hjb_residual" {
                return Err(bad(1, "unexpected values.csv header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(i + 1, "expected 6 comma-separated fields"));
        }
        let mut nums = [0.0f64; 6];
        for (slot, field) in nums.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|_| bad(i + 1, "unparseable real"))?;
        }
        rows.push(ValueRow {
            tau: nums[0],
            node_x: nums[1],
            v: nums[2],
            vx: nums[3],
            vxx: nums[4],
            hjb_residual: nums[5],
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy)]
pub struct CoeffRow {
    pub tau: f64,
    pub a1: f64,
    pub a2: f64,
    pub i1: f64,
    pub i2: f64,
    pub mu: f64,
    pub var: f64,
    pub entropy: f64,
}

pub fn write_coeffs(path: &Path, rows: &[CoeffRow]) -> io::Result<()> {
    let mut out = String::from("tau,a1,a2,I1,I2,mu,var,entropy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            real(r.tau),
            real(r.a1),
            real(r.a2),
            real(r.i1),
            real(r.i2),
            real(r.mu),
            real(r.var),
            real(r.entropy)
        ));
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone, Copy)]
pub struct ParticleRow {
    pub tau: f64,
    pub state_x: f64,
    pub particle_index: usize,
    pub u: f64,
}

pub fn write_particles(path: &Path, rows: &[ParticleRow]) -> io::Result<()> {
    let mut out = String::from("tau,state_x,particle_index,u\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            real(r.tau),
            real(r.state_x),
            r.particle_index,
            real(r.u)
        ));
    }
    std::fs::write(path, out)
}

pub fn write_diagnostics(path: &Path, series: &[(f64, String, f64)]) -> io::Result<()> {
    let mut out = String::from("tau,metric,value\n");
    for (tau, metric, value) in series {
        out.push_str(&format!("{},{metric},{}\n", real(*tau), real(*value)));
    }
    std::fs::write(path, out)
}

/// Key-value summary: `name = value` for plain facts and
/// `name = value | pass/fail | tolerance` for judged checks, with a final
/// `overall` verdict line.
pub fn summary_text(items: &[SummaryItem]) -> String {
    let mut out = String::new();
    let mut all = true;
    for item in items {
        match (item.pass, &item.tolerance) {
            (Some(ok), Some(tol)) => {
                all &= ok;
                out.push_str(&format!(
                    "{} = {} | {} | {tol}\n",
                    item.name,
                    item.value,
                    if ok { "pass" } else { "fail" }
                ));
            }
            _ => out.push_str(&format!("{} = {}\n", item.name, item.value)),
        }
    }
    out.push_str(&format!("overall = {}\n", if all { "pass" } else { "fail" }));
    out
}

pub fn write_summary(path: &Path, items: &[SummaryItem]) -> io::Result<()> {
    std::fs::write(path, summary_text(items))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[allow(clippy::excessive_precision)]
    fn reals_round_trip_through_seventeen_digits() {
        for &x in &[0.1, -1.0 / 3.0, 2.0f64.sqrt() * 1e-8, -4.3425854591066487e-1] {
            let s = real(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, x, "{s}");
        }
    }

    #[test]
    fn values_csv_round_trips() {
        let dir = std::env::temp_dir().join("pvi_report_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("values.csv");
        let rows = vec![
            ValueRow {
                tau: 0.0,
                node_x: -3.0,
                v: 0.125,
                vx: 1.0 / 3.0,
                vxx: -0.5,
                hjb_residual: 1e-7,
            },
            ValueRow {
                tau: 0.1,
                node_x: -3.0,
                v: 0.25,
                vx: 0.0,
                vxx: -0.5,
                hjb_residual: -2e-8,
            },
        ];
        write_values(&path, &rows).unwrap();
        let back = read_values(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].vx, rows[0].vx);
        assert_eq!(back[1].hjb_residual, rows[1].hjb_residual);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn summary_reports_overall_verdict() {
        let items = vec![
            SummaryItem::info("nodes", "101"),
            SummaryItem::check("hjb_max", "1e-5", true, "<= 1e-3"),
        ];
        let text = summary_text(&items);
        assert!(text.contains("nodes = 101\n"));
        assert!(text.contains("hjb_max = 1e-5 | pass | <= 1e-3\n"));
        assert!(text.ends_with("overall = pass\n"));
        let items = vec![SummaryItem::check("mono", "0.1", false, "<= 1e-6")];
        assert!(summary_text(&items).ends_with("overall = fail\n"));
    }
}
