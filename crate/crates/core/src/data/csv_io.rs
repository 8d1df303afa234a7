//! Windowed CSV exchange format: one row per timestep with columns
//! `domain_id, instance_id, label, ch_0 .. ch_{C-1}`. A window is a
//! contiguous run of rows sharing `(domain_id, instance_id)`.

use std::io::{Read, Write};
use std::path::Path;

use super::dataset::DomainDataset;
use crate::error::{Error, Result};

pub fn write_csv<W: Write>(datasets: &[DomainDataset], w: W) -> Result<()> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::invalid("write_csv: no datasets"))?;
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["domain_id".to_string(), "instance_id".into(), "label".into()];
    header.extend((0..first.channels()).map(|c| format!("ch_{c}")));
    wr.write_record(&header).map_err(csv_err)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for d in datasets {
        if d.channels() != first.channels() {
            return Err(Error::invalid("write_csv: datasets differ in channel count"));
        }
        let l = d.length();
        for i in 0..d.len() {
            let win = d.window(i);
            for t in 0..l {
                row.clear();
                row.push(d.domain_id().to_string());
                row.push(i.to_string());
                row.push(d.label(i).to_string());
                for c in 0..d.channels() {
                    // `{:?}` is the shortest representation that parses back exactly.
                    row.push(format!("{:?}", win[c * l + t]));
                }
                wr.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    wr.flush().map_err(|e| Error::io("writing csv", e))?;
    Ok(())
}

pub fn write_csv_file(datasets: &[DomainDataset], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_csv(datasets, std::io::BufWriter::new(f))
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

/// Reads windows of `length` timesteps. The class count is the larger of
/// `num_classes` (if given) and one past the largest label seen.
pub fn read_csv<R: Read>(r: R, length: usize, num_classes: Option<usize>) -> Result<Vec<DomainDataset>> {
    if length == 0 {
        return Err(Error::invalid("read_csv: window length must be positive"));
    }
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(csv_err)?.clone();
    let fixed = ["domain_id", "instance_id", "label"];
    if headers.len() < 4 || headers.iter().take(3).ne(fixed.iter().copied()) {
        return Err(Error::format("csv", format!("expected header {fixed:?} + ch_*, got {headers:?}")));
    }
    let channels = headers.len() - 3;
    for (c, h) in headers.iter().skip(3).enumerate() {
        if h != format!("ch_{c}") {
            return Err(Error::format("csv", format!("column {} should be ch_{c}, found {h}", c + 3)));
        }
    }

    struct Partial {
        id: String,
        data: Vec<f64>,
        labels: Vec<usize>,
    }
    let mut domains: Vec<Partial> = Vec::new();
    let mut current: Option<(String, String, usize)> = None;
    let mut steps: Vec<Vec<f64>> = Vec::new();
    let mut max_label = 0usize;

    let flush = |key: &(String, String, usize), steps: &mut Vec<Vec<f64>>, domains: &mut Vec<Partial>| -> Result<()> {
        if steps.len() != length {
            return Err(Error::format(
                "csv",
                format!("window {}/{} has {} rows, expected {length}", key.0, key.1, steps.len()),
            ));
        }
        let pos = match domains.iter().position(|d| d.id == key.0) {
            Some(p) => p,
            None => {
                domains.push(Partial {
                    id: key.0.clone(),
                    data: Vec::new(),
                    labels: Vec::new(),
                });
                domains.len() - 1
            }
        };
        let d = &mut domains[pos];
        for c in 0..channels {
            d.data.extend(steps.iter().map(|s| s[c]));
        }
        d.labels.push(key.2);
        steps.clear();
        Ok(())
    };

    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parse_err = |what: &str| Error::format("csv", format!("row {}: bad {what}", line + 2));
        let dom = rec[0].to_string();
        let inst = rec[1].to_string();
        let label: usize = rec[2].trim().parse().map_err(|_| parse_err("label"))?;
        let values = (3..rec.len())
            .map(|i| rec[i].trim().parse::<f64>().map_err(|_| parse_err("value")))
            .collect::<Result<Vec<_>>>()?;
        max_label = max_label.max(label);
        let same = matches!(&current, Some((d, i, _)) if *d == dom && *i == inst);
        if same {
            if current.as_ref().unwrap().2 != label {
                return Err(Error::format("csv", format!("row {}: label changes inside window {dom}/{inst}", line + 2)));
            }
            if steps.len() == length {
                flush(current.as_ref().unwrap(), &mut steps, &mut domains)?;
            }
        } else if let Some(key) = current.take() {
            flush(&key, &mut steps, &mut domains)?;
        }
        current = Some((dom, inst, label));
        steps.push(values);
    }
    if let Some(key) = current.take() {
        flush(&key, &mut steps, &mut domains)?;
    }
    if domains.is_empty() {
        return Err(Error::format("csv", "no rows"));
    }
    let k = num_classes.unwrap_or(0).max(max_label + 1);
    domains
        .into_iter()
        .map(|p| DomainDataset::new(p.id, k, channels, length, p.data, p.labels))
        .collect()
}

pub fn read_csv_file(path: &Path, length: usize, num_classes: Option<usize>) -> Result<Vec<DomainDataset>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_csv(std::io::BufReader::new(f), length, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SyntheticConfig};

    #[test]
    fn write_then_read_reproduces_values() {
        let cfg = SyntheticConfig {
            domains: 2,
            instances_per_domain: 12,
            length: 16,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), 16, Some(6)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ds.iter().zip(&back) {
            assert_eq!(a.domain_id(), b.domain_id());
            assert_eq!(a.labels(), b.labels());
            for (x, y) in a.raw().iter().zip(b.raw()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn short_window_rejected() {
        let text = "domain_id,instance_id,label,ch_0\nu1,0,1,0.5\nu1,0,1,0.25\nu1,1,0,0.1\n";
        let err = read_csv(text.as_bytes(), 2, None).unwrap_err().to_string();
        assert!(err.contains("u1/1"), "{err}");
    }

    #[test]
    fn consecutive_windows_with_same_instance_id_split_by_length() {
        let text = "domain_id,instance_id,label,ch_0\na,0,1,1\na,0,1,2\na,0,1,3\na,0,1,4\n";
        let ds = read_csv(text.as_bytes(), 2, None).unwrap();
        assert_eq!(ds[0].len(), 2);
        assert_eq!(ds[0].num_classes(), 2);
    }
}
