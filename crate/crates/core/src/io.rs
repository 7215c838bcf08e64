//! Snapshot and trajectory export.
//!
//! States go out as CSV (`index,component,x[,y],value`) or as flat
//! little-endian f64 binaries with a JSON sidecar describing the layout.

use std::fs::File;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::Result;
use crate::field::{FieldLayout, FieldState};

/// Serde adapter for `DVector<f64>` fields (plain JSON array).
pub mod dvector_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Writes one state as CSV. A `y` column is emitted only when the layout
/// carries 2D coordinates.
pub fn write_state_csv(state: &FieldState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let two_d = state.layout.slots.iter().any(|s| s.y.is_some());
    if two_d {
        writeln!(w, "index,component,x,y,value")?;
    } else {
        writeln!(w, "index,component,x,value")?;
    }
    for (k, (slot, &value)) in state.layout.slots.iter().zip(state.data.iter()).enumerate() {
        if two_d {
            writeln!(
                w,
                "{k},{},{:.17e},{:.17e},{:.17e}",
                slot.component.label(),
                slot.x,
                slot.y.unwrap_or(f64::NAN),
                value
            )?;
        } else {
            writeln!(w, "{k},{},{:.17e},{:.17e}", slot.component.label(), slot.x, value)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BinarySidecar<'a> {
    format: &'static str,
    endianness: &'static str,
    dtype: &'static str,
    len: usize,
    layout: &'a FieldLayout,
}

/// Writes a state as raw little-endian f64 values plus `<path>.json`
/// describing the layout.
pub fn write_state_binary(state: &FieldState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &x in state.data.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;

    let sidecar = BinarySidecar {
        format: "flat-state-v1",
        endianness: "little",
        dtype: "f64",
        len: state.data.len(),
        layout: &state.layout,
    };
    let sidecar_path = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.json", ext.to_string_lossy()),
        None => "json".to_string(),
    });
    let file = File::create(sidecar_path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), &sidecar)
        .map_err(|e| crate::error::Error::Parse(e.to_string()))?;
    Ok(())
}

/// Reads back a flat f64 binary written by [`write_state_binary`].
pub fn read_flat_binary(path: &Path) -> Result<DVector<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(crate::error::Error::Parse(format!(
            "binary state file length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(DVector::from_iterator(
        bytes.len() / 8,
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())),
    ))
}

/// Writes a trajectory summary as CSV rows `step,time,energy`.
pub fn write_trajectory_csv(times: &[f64], states: &[FieldState], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,time,energy")?;
    for (n, (t, u)) in times.iter().zip(states.iter()).enumerate() {
        writeln!(w, "{n},{:.17e},{:.17e}", t, u.energy())?;
    }
    w.flush()?;
    Ok(())
}

/// Serializes any report type as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)
        .map_err(|e| crate::error::Error::Parse(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Component, Slot};
    use std::sync::Arc;

    fn sample_state() -> FieldState {
        let slots = vec![
            Slot { component: Component::E, x: 0.25, y: None },
            Slot { component: Component::E, x: 0.5, y: None },
            Slot { component: Component::H, x: 0.125, y: None },
        ];
        let layout = FieldLayout::new(
            "toy",
            2,
            1,
            DVector::from_element(3, 0.5),
            DVector::from_element(3, 1.0),
            slots,
        )
        .unwrap();
        FieldState::from_vector(Arc::clone(&layout), DVector::from_vec(vec![1.0, -2.0, 3.5])).unwrap()
    }

    #[test]
    fn csv_has_header_and_rows() {
        let dir = std::env::temp_dir().join(format!("srkm-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.csv");
        write_state_csv(&sample_state(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "index,component,x,value");
        assert_eq!(lines.count(), 3);
        assert!(text.contains("1,E,"));
        assert!(text.contains("2,H,"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn binary_roundtrip_with_sidecar() {
        let dir = std::env::temp_dir().join(format!("srkm-io-bin-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.bin");
        let state = sample_state();
        write_state_binary(&state, &path).unwrap();
        let back = read_flat_binary(&path).unwrap();
        assert_eq!(back, state.data);
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("state.bin.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["len"], 3);
        assert_eq!(sidecar["endianness"], "little");
        assert_eq!(sidecar["layout"]["e_len"], 2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
