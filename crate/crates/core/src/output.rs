use std::io::Write;

use faer::MatRef;
use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

/// Wide CSV: a `unit` column followed by one column per period label.
pub fn write_matrix_csv<W: Write>(
    writer: W,
    values: MatRef<'_, f64>,
    unit_labels: &[String],
    time_labels: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = Vec::with_capacity(time_labels.len() + 1);
    header.push("unit".to_string());
    header.extend(time_labels.iter().cloned());
    w.write_record(&header)?;
    for i in 0..values.nrows() {
        let mut row = Vec::with_capacity(values.ncols() + 1);
        row.push(unit_labels[i].clone());
        row.extend((0..values.ncols()).map(|t| format_f64(values[(i, t)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON in which every floating-point number carries seventeen
/// significant digits; integers are written as-is and non-finite floats as
/// `null`.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    Ok(out)
}

fn write_value(out: &mut String, v: &Value, depth: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Number(n) if n.is_f64() => match n.as_f64() {
            Some(x) if x.is_finite() => out.push_str(&format_f64(x)),
            _ => out.push_str("null"),
        },
        Value::Array(items) if !items.is_empty() => {
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) if !map.is_empty() => {
            out.push_str("{\n");
            for (k, (key, item)) in map.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String(key.clone()).to_string());
                out.push_str(": ");
                write_value(out, item, depth + 1);
                out.push_str(if k + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}
