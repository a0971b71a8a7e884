//! Long-format CSV: one row per observation with header
//! `series_id,replicate_id,time,value`.
//!
//! Series keep their order of first appearance. Within a series, points are
//! ordered by replicate label, then time; every series must have exactly the
//! same (replicate, time) points. `replicate_id` is empty for flat data.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use hgpclust_core::hgp::DesignLevel;
use hgpclust_core::{Design, GroupedDataset};

use crate::error::{invalid, CliError, Result};

pub const HEADER: [&str; 4] = ["series_id", "replicate_id", "time", "value"];
pub const REPLICATE_LEVEL: &str = "replicate";

struct Point {
    replicate: String,
    time: f64,
    value: f64,
    line: u64,
}

pub fn read_dataset(path: &Path) -> Result<GroupedDataset> {
    let file = std::fs::File::open(path).map_err(CliError::io(path))?;
    ingest(file).map_err(|e| match e {
        CliError::Validation(m) => invalid(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn ingest<R: Read>(reader: R) -> Result<GroupedDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| invalid(format!("cannot read header: {e}")))?;
    if header.iter().ne(HEADER) {
        return Err(invalid(format!(
            "header must be `{}`, found `{}`",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut series: Vec<Vec<Point>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            invalid(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |i: usize, what: &str| -> Result<f64> {
            let v: f64 = record[i]
                .parse()
                .map_err(|_| invalid(format!("line {line}: {what} `{}` is not a number", &record[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(invalid(format!("line {line}: {what} `{}` is not finite", &record[i])))
            }
        };
        let id = &record[0];
        if id.is_empty() {
            return Err(invalid(format!("line {line}: empty series_id")));
        }
        let point = Point {
            replicate: record[1].to_string(),
            time: number(2, "time")?,
            value: number(3, "value")?,
            line,
        };
        let n = *index.entry(id.to_string()).or_insert_with(|| {
            names.push(id.to_string());
            series.push(Vec::new());
            names.len() - 1
        });
        series[n].push(point);
    }
    if series.is_empty() {
        return Err(invalid("no data rows"));
    }

    let replicated = series[0][0].replicate.is_empty();
    if let Some(p) = series.iter().flatten().find(|p| p.replicate.is_empty() != replicated) {
        return Err(invalid(format!(
            "line {}: replicate_id must be empty on every row or on none",
            p.line
        )));
    }
    let replicated = !replicated;

    for (points, name) in series.iter_mut().zip(&names) {
        points.sort_by(|a, b| a.replicate.cmp(&b.replicate).then(a.time.total_cmp(&b.time)));
        for w in points.windows(2) {
            if w[0].replicate == w[1].replicate && w[0].time == w[1].time {
                return Err(invalid(format!(
                    "line {}: series {name} repeats time {} in replicate `{}`",
                    w[1].line, w[1].time, w[1].replicate
                )));
            }
        }
    }
    let key = |points: &[Point]| -> Vec<(String, u64)> {
        points.iter().map(|p| (p.replicate.clone(), p.time.to_bits())).collect()
    };
    let reference = key(&series[0]);
    let offending: Vec<&str> = series
        .iter()
        .zip(&names)
        .filter(|(p, _)| key(p) != reference)
        .map(|(_, n)| n.as_str())
        .collect();
    if !offending.is_empty() {
        return Err(invalid(format!(
            "series do not share the design of series {}: {}",
            names[0],
            offending.join(", ")
        )));
    }

    let times: Vec<f64> = series[0].iter().map(|p| p.time).collect();
    let mut design = Design::flat(times);
    if replicated {
        let labels: Vec<String> = series[0]
            .iter()
            .map(|p| p.replicate.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let ids = series[0]
            .iter()
            .map(|p| labels.binary_search(&p.replicate).unwrap())
            .collect();
        design.levels.push(DesignLevel {
            name: REPLICATE_LEVEL.into(),
            labels,
            ids,
        });
    }
    let groups = series
        .iter()
        .map(|points| points.iter().map(|p| p.value).collect())
        .collect();
    Ok(GroupedDataset::new(design, groups, names)?)
}

pub fn emit<W: Write>(data: &GroupedDataset, writer: W) -> Result<()> {
    let design = data.design();
    let replicate = design.levels.iter().find(|l| l.name == REPLICATE_LEVEL);
    let mut w = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| invalid(format!("cannot write CSV: {e}"));
    w.write_record(HEADER).map_err(fail)?;
    for (n, name) in data.names().iter().enumerate() {
        for (i, t) in design.times.iter().enumerate() {
            let rep = replicate.map_or("", |l| l.labels[l.ids[i]].as_str());
            w.write_record([name.as_str(), rep, &t.to_string(), &data.values()[(i, n)].to_string()])
                .map_err(fail)?;
        }
    }
    w.flush().map_err(|e| invalid(format!("cannot write CSV: {e}")))?;
    Ok(())
}

pub fn write_dataset(data: &GroupedDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(CliError::io(path))?;
    emit(data, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<GroupedDataset> {
        ingest(text.as_bytes())
    }

    #[test]
    fn flat_two_by_three() {
        let d = parse("series_id,replicate_id,time,value\na,,0,1\na,,1,2\na,,2,3\nb,,2,6\nb,,0,4\nb,,1,5\n").unwrap();
        assert_eq!(d.n_groups(), 2);
        assert_eq!(d.dim(), 3);
        assert_eq!(d.names(), ["a", "b"]);
        assert_eq!(d.group(1).as_slice(), [4.0, 5.0, 6.0]);
        assert!(d.design().levels.is_empty());
    }

    #[test]
    fn missing_point_names_the_series() {
        let e = parse("series_id,replicate_id,time,value\na,,0,1\na,,1,2\nb,,0,4\nc,,0,1\nc,,1,1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("b") && !e.contains(": a"), "{e}");
    }

    #[test]
    fn bad_numbers_report_the_line() {
        let e = parse("series_id,replicate_id,time,value\na,,0,1\na,,1,oops\n").unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = parse("series_id,replicate_id,time,value\na,,0,NaN\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn structural_errors() {
        assert!(parse("id,rep,time,value\na,,0,1\n").is_err());
        assert!(parse("series_id,replicate_id,time,value\n").is_err());
        assert!(parse("series_id,replicate_id,time,value\na,,0,1\na,,0,2\n").is_err());
        assert!(parse("series_id,replicate_id,time,value\na,r1,0,1\na,,1,2\n").is_err());
        assert!(parse("series_id,replicate_id,time,value\na,,0\n").is_err());
    }

    #[test]
    fn replicated_design_with_jointly_absent_times() {
        // Time 2 is absent from both replicates of every series.
        let mut text = String::from("series_id,replicate_id,time,value\n");
        for s in ["g1", "g2"] {
            for r in ["r1", "r2"] {
                for t in [0, 1, 3] {
                    text.push_str(&format!("{s},{r},{t},{}\n", t as f64 * 0.5));
                }
            }
        }
        let d = parse(&text).unwrap();
        assert_eq!(d.dim(), 6);
        assert_eq!(d.design().times, [0.0, 1.0, 3.0, 0.0, 1.0, 3.0]);
        let level = &d.design().levels[0];
        assert_eq!(level.labels, ["r1", "r2"]);
        assert_eq!(level.ids, [0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn emit_then_ingest_is_identity() {
        let text = "series_id,replicate_id,time,value\nx,a,0.1,1.5\nx,b,0.1,-2\ny,a,0.1,3e-7\ny,b,0.1,0.30000000000000004\n";
        let d = parse(text).unwrap();
        let mut out = Vec::new();
        emit(&d, &mut out).unwrap();
        assert_eq!(parse(std::str::from_utf8(&out).unwrap()).unwrap(), d);
    }
}
