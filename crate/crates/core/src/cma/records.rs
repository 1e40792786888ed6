// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-sample records as CSV. Lines starting with `#` are comments; the
//! head column is empty for submodule-level sites.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::Submodule;

use super::{MetricKind, SiteRecord};

pub const RECORDS_HEADER: &str = "layer,submodule,head,token_pos,sample_id,metric,value";

pub fn write_records_csv(records: &[SiteRecord], mut w: impl Write) -> Result<()> {
    let mut buf = String::with_capacity(48 * (records.len() + 1));
    buf.push_str(RECORDS_HEADER);
    buf.push('\n');
    for r in records {
        let head = r.head.map(|h| h.to_string()).unwrap_or_default();
        buf.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer,
            r.submodule.as_str(),
            head,
            r.token_pos,
            r.sample_id,
            r.metric.as_str(),
            r.value
        ));
    }
    w.write_all(buf.as_bytes())
        .map_err(|e| Error::io("<records>", e))
}

pub fn read_records_csv(r: impl BufRead) -> Result<Vec<SiteRecord>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<records>", e))?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != RECORDS_HEADER {
                return Err(Error::Data(format!("unexpected records header `{line}`")));
            }
            saw_header = true;
            continue;
        }
        let bad = |what: &str| Error::Data(format!("records line {}: bad {what}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad("field count"));
        }
        out.push(SiteRecord {
            layer: f[0].parse().map_err(|_| bad("layer"))?,
            submodule: Submodule::parse(f[1]).ok_or_else(|| bad("submodule"))?,
            head: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad("head"))?)
            },
            token_pos: f[3].parse().map_err(|_| bad("token_pos"))?,
            sample_id: f[4].parse().map_err(|_| bad("sample_id"))?,
            metric: MetricKind::parse(f[5])?,
            value: f[6].parse().map_err(|_| bad("value"))?,
        });
    }
    if !saw_header {
        return Err(Error::Data("records file has no header".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..20), head in prop::option::of(0usize..8)) {
            let records: Vec<SiteRecord> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| SiteRecord {
                    layer: i % 6,
                    submodule: Submodule::CrossAttn,
                    head,
                    token_pos: i % 9,
                    sample_id: i,
                    metric: MetricKind::LogitDifference,
                    value: v,
                })
                .collect();
            let mut buf = b"# provenance line\n".to_vec();
            write_records_csv(&records, &mut buf).unwrap();
            let back = read_records_csv(&buf[..]).unwrap();
            prop_assert_eq!(back, records);
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_records_csv(&b"a,b\n"[..]).is_err());
        let text = format!("{RECORDS_HEADER}\n0,mlp,,1,2,kl,0.5\n");
        assert!(matches!(
            read_records_csv(text.as_bytes()),
            Err(Error::MetricUnknown(_))
        ));
    }
}
