//! Attack report CSV: one `summary` row followed by one `frame` row per frame.
//!
//! Floats are written in shortest round-trip form, so parsing a written report
//! gives back the identical values.

use std::fmt::Write as _;
use std::io::Write;

use sha2::{Digest, Sha256};

use crate::config::{canonical_text, Ini};
use crate::metrics::{AttackReport, FrameRecord};
use crate::{Error, Result};

pub const REPORT_HEADER: [&str; 15] = [
    "record",
    "method",
    "instance",
    "config_hash",
    "iou_acc",
    "clean_iou_acc",
    "adv_br",
    "map",
    "nuclear_norm",
    "frobenius_norm",
    "channel_nuclear",
    "frame",
    "iou",
    "clean_boxes",
    "adv_boxes",
];

/// First 16 hex digits of the SHA-256 of the canonical config text.
pub fn config_hash(ini: &Ini) -> String {
    let digest = Sha256::digest(canonical_text(ini).as_bytes());
    digest[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn check_field(name: &str, v: &str) -> Result<()> {
    if v.contains(['\n', '\r']) {
        return Err(Error::Argument(format!("report {name} must be a single line")));
    }
    Ok(())
}

pub fn write_report<W: Write>(report: &AttackReport, out: W) -> Result<()> {
    check_field("method", &report.method)?;
    check_field("instance", &report.instance)?;
    check_field("config hash", &report.config_hash)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    let channels = report
        .channel_nuclear
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(";");
    w.write_record([
        "summary".to_string(),
        report.method.clone(),
        report.instance.clone(),
        report.config_hash.clone(),
        report.iou_acc.to_string(),
        report.clean_iou_acc.to_string(),
        report.adv_br.to_string(),
        report.map.to_string(),
        report.nuclear_norm.to_string(),
        report.frobenius_norm.to_string(),
        channels,
        String::new(),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    for f in &report.frames {
        let mut row = vec![String::new(); REPORT_HEADER.len()];
        row[0] = "frame".into();
        row[11] = f.index.to_string();
        row[12] = f.iou.to_string();
        row[13] = f.clean_boxes.to_string();
        row[14] = f.adv_boxes.to_string();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_to_string(report: &AttackReport) -> Result<String> {
    let mut buf = Vec::new();
    write_report(report, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse().map_err(|_| {
        Error::Format(format!(
            "report line {line}: column {} has invalid value {raw:?}",
            REPORT_HEADER[idx]
        ))
    })
}

fn finite(v: f64, name: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Format(format!("report {name} is not finite")))
    }
}

/// Parses a report from untrusted bytes.
pub fn parse_report(bytes: &[u8]) -> Result<AttackReport> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr.headers()?.clone();
    if header.iter().ne(REPORT_HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "unexpected report columns {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut summary: Option<AttackReport> = None;
    let mut frames = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        match rec.get(0) {
            Some("summary") => {
                if summary.is_some() {
                    return Err(Error::Format("report has more than one summary row".into()));
                }
                let channel_nuclear = match rec.get(10).unwrap_or("") {
                    "" => Vec::new(),
                    s => s
                        .split(';')
                        .map(|v| {
                            v.parse::<f64>()
                                .map_err(|_| Error::Format(format!("invalid channel norm {v:?}")))
                                .and_then(|v| finite(v, "channel_nuclear"))
                        })
                        .collect::<Result<_>>()?,
                };
                summary = Some(AttackReport {
                    method: rec.get(1).unwrap_or("").to_string(),
                    instance: rec.get(2).unwrap_or("").to_string(),
                    config_hash: rec.get(3).unwrap_or("").to_string(),
                    iou_acc: finite(field(&rec, 4, line)?, "iou_acc")?,
                    clean_iou_acc: finite(field(&rec, 5, line)?, "clean_iou_acc")?,
                    adv_br: finite(field(&rec, 6, line)?, "adv_br")?,
                    map: finite(field(&rec, 7, line)?, "map")?,
                    nuclear_norm: finite(field(&rec, 8, line)?, "nuclear_norm")?,
                    frobenius_norm: finite(field(&rec, 9, line)?, "frobenius_norm")?,
                    channel_nuclear,
                    frames: Vec::new(),
                });
            }
            Some("frame") => frames.push(FrameRecord {
                index: field(&rec, 11, line)?,
                iou: finite(field(&rec, 12, line)?, "iou")?,
                clean_boxes: field(&rec, 13, line)?,
                adv_boxes: field(&rec, 14, line)?,
            }),
            other => {
                return Err(Error::Format(format!(
                    "report line {line}: unknown record kind {other:?}"
                )))
            }
        }
    }
    let mut report = summary.ok_or_else(|| Error::Format("report has no summary row".into()))?;
    report.frames = frames;
    Ok(report)
}

/// Human-readable summary block.
pub fn summary_text(r: &AttackReport) -> String {
    let clean: usize = r.frames.iter().map(|f| f.clean_boxes).sum();
    let adv: usize = r.frames.iter().map(|f| f.adv_boxes).sum();
    let mut s = String::new();
    let _ = writeln!(s, "method          {}", r.method);
    let _ = writeln!(s, "instance        {}", r.instance);
    let _ = writeln!(s, "frames          {}", r.frames.len());
    let _ = writeln!(s, "boxes           {clean} clean, {adv} adversarial");
    let _ = writeln!(s, "IoU_acc         {:.4} (clean {:.4})", r.iou_acc, r.clean_iou_acc);
    let _ = writeln!(s, "advBR           {:.4}", r.adv_br);
    let _ = writeln!(s, "MAP             {:.6}", r.map);
    let _ = writeln!(s, "nuclear norm    {:.4}", r.nuclear_norm);
    let _ = writeln!(s, "frobenius norm  {:.4}", r.frobenius_norm);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_ini;

    fn sample() -> AttackReport {
        AttackReport {
            method: "ao-exp".into(),
            instance: "scene, \"a\"".into(),
            config_hash: "0123456789abcdef".into(),
            iou_acc: 0.1 + 0.2,
            clean_iou_acc: 2.0,
            adv_br: 0.25,
            map: 1.0 / 3.0,
            channel_nuclear: vec![1.5, 2.25, 1e-300],
            nuclear_norm: 3.75,
            frobenius_norm: 0.7,
            frames: vec![
                FrameRecord { index: 0, iou: 0.0, clean_boxes: 2, adv_boxes: 0 },
                FrameRecord { index: 1, iou: 0.6, clean_boxes: 2, adv_boxes: 1 },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let r = sample();
        let text = report_to_string(&r).unwrap();
        assert!(text.starts_with("record,method,instance,config_hash,"));
        assert_eq!(parse_report(text.as_bytes()).unwrap(), r);
    }

    #[test]
    fn rejects_malformed_reports() {
        assert!(parse_report(b"").is_err());
        assert!(parse_report(b"a,b\n1,2\n").is_err());
        let text = report_to_string(&sample()).unwrap();
        let no_summary: String = text.lines().filter(|l| !l.starts_with("summary")).collect::<Vec<_>>().join("\n");
        assert!(matches!(parse_report(no_summary.as_bytes()), Err(Error::Format(_))));
        let bad_value = text.replace(",0.25,", ",quarter,");
        assert!(parse_report(bad_value.as_bytes()).is_err());
        let nan = text.replace(",0.25,", ",NaN,");
        assert!(parse_report(nan.as_bytes()).is_err());
    }

    #[test]
    fn hash_is_stable_and_order_free() {
        let a = parse_ini("[x]\na = 1\nb = 2\n").unwrap();
        let b = parse_ini("[x]\nb = 2\na = 1\n").unwrap();
        let c = parse_ini("[x]\na = 1\nb = 3\n").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 16);
    }
}
