//! Output writers: legacy ASCII VTK, CSV history, PGM images, and the
//! atomic-write primitive they all share.
//!
//! Every writer builds the full text in memory and lands it atomically, and
//! every number is printed in Rust's shortest round-trip notation, so
//! identical inputs give byte-identical files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::QuadMesh;
use crate::opt::IterationRecord;

/// Reads a whole text file, naming the file in the error — a bare
/// "No such file or directory" helps nobody pick the right path.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Writes `content` to `path` atomically: the bytes land in a sibling
/// temporary file first and are moved into place with a rename, so readers
/// never observe a half-written file.
pub fn atomic_write(path: &Path, content: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{file_name}.tmp"));
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One per-element scalar field for VTK cell data.
pub struct CellScalar<'a> {
    pub name: &'a str,
    /// One value per element.
    pub values: &'a [f64],
}

/// Renders a legacy ASCII VTK unstructured grid: quad cells, optionally
/// displaced point coordinates with the displacement vector as point data,
/// and any number of per-element scalars as cell data.
pub fn vtk_text(
    title: &str,
    mesh: &QuadMesh,
    u: Option<&[f64]>,
    cell_scalars: &[CellScalar],
) -> Result<String> {
    let n = mesh.num_nodes();
    let n_el = mesh.num_elements();
    if let Some(u) = u {
        if u.len() != 2 * n {
            return Err(Error::Domain(format!(
                "displacement vector has {} entries for {} nodes",
                u.len(),
                n
            )));
        }
    }
    for s in cell_scalars {
        if s.values.len() != n_el {
            return Err(Error::Domain(format!(
                "cell scalar '{}' has {} values for {} elements",
                s.name,
                s.values.len(),
                n_el
            )));
        }
    }

    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str(title);
    out.push('\n');
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");

    out.push_str(&format!("POINTS {n} double\n"));
    for (i, p) in mesh.nodes.iter().enumerate() {
        let (x, y) = match u {
            Some(u) => (p[0] + u[2 * i], p[1] + u[2 * i + 1]),
            None => (p[0], p[1]),
        };
        out.push_str(&format!("{x} {y} 0\n"));
    }

    out.push_str(&format!("CELLS {n_el} {}\n", 5 * n_el));
    for conn in &mesh.elements {
        out.push_str(&format!("4 {} {} {} {}\n", conn[0], conn[1], conn[2], conn[3]));
    }
    out.push_str(&format!("CELL_TYPES {n_el}\n"));
    for _ in 0..n_el {
        out.push_str("9\n");
    }

    if let Some(u) = u {
        out.push_str(&format!("POINT_DATA {n}\n"));
        out.push_str("VECTORS u double\n");
        for i in 0..n {
            out.push_str(&format!("{} {} 0\n", u[2 * i], u[2 * i + 1]));
        }
    }

    if !cell_scalars.is_empty() {
        out.push_str(&format!("CELL_DATA {n_el}\n"));
        for s in cell_scalars {
            out.push_str(&format!("SCALARS {} double 1\nLOOKUP_TABLE default\n", s.name));
            for v in s.values {
                out.push_str(&format!("{v}\n"));
            }
        }
    }
    Ok(out)
}

/// Writes a VTK file atomically; see [`vtk_text`].
pub fn write_vtk(
    path: &Path,
    title: &str,
    mesh: &QuadMesh,
    u: Option<&[f64]>,
    cell_scalars: &[CellScalar],
) -> Result<()> {
    atomic_write(path, &vtk_text(title, mesh, u, cell_scalars)?)
}

/// Renders the optimization history as CSV.
///
/// Columns: iteration, the raw objective, the normalized objective, one
/// column per constraint (named by `constraint_labels`), grayness, the
/// schedule values, the total loss, Newton iteration counts per load case
/// (named by `case_names`), and the retry flag. Wall-clock timing is
/// deliberately excluded so that identical runs produce byte-identical
/// files.
pub fn history_csv(
    records: &[IterationRecord],
    constraint_labels: &[String],
    case_names: &[String],
) -> Result<String> {
    let mut out = String::from("iteration,objective,j_over_j0");
    for label in constraint_labels {
        out.push(',');
        out.push_str(label);
    }
    out.push_str(",grayness,tau,simp_p,xi,loss");
    for name in case_names {
        out.push_str(&format!(",newton_iters_{name}"));
    }
    out.push_str(",retried\n");

    for r in records {
        if r.constraint_values.len() != constraint_labels.len() {
            return Err(Error::Domain(format!(
                "history row {} has {} constraint values for {} labels",
                r.iteration,
                r.constraint_values.len(),
                constraint_labels.len()
            )));
        }
        if r.newton_iterations.len() != case_names.len() {
            return Err(Error::Domain(format!(
                "history row {} has {} Newton counts for {} load cases",
                r.iteration,
                r.newton_iterations.len(),
                case_names.len()
            )));
        }
        out.push_str(&format!("{},{},{}", r.iteration, r.objective_raw, r.j_over_j0));
        for g in &r.constraint_values {
            out.push_str(&format!(",{g}"));
        }
        out.push_str(&format!(
            ",{},{},{},{},{}",
            r.grayness, r.tau, r.simp_p, r.xi, r.loss
        ));
        for n in &r.newton_iterations {
            out.push_str(&format!(",{n}"));
        }
        out.push_str(&format!(",{}\n", u8::from(r.retried)));
    }
    Ok(out)
}

/// Writes the history CSV atomically; see [`history_csv`].
pub fn write_history_csv(
    path: &Path,
    records: &[IterationRecord],
    constraint_labels: &[String],
    case_names: &[String],
) -> Result<()> {
    atomic_write(path, &history_csv(records, constraint_labels, case_names)?)
}

/// Renders a plain-text (P2) portable graymap from values in `[0, 1]`.
///
/// `values` is row-major with row 0 at the top of the image; each value maps
/// linearly to gray levels 0..=255 (values outside `[0, 1]` are clamped).
pub fn pgm_text(values: &[f64], width: usize, height: usize) -> Result<String> {
    if width == 0 || height == 0 || values.len() != width * height {
        return Err(Error::Domain(format!(
            "graymap shape {width} x {height} does not match {} values",
            values.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite graymap value {v}")));
    }
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let mut first = true;
        for &v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let level = (v.clamp(0.0, 1.0) * 255.0).round() as u32;
            out.push_str(&format!("{level}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes a PGM file atomically; see [`pgm_text`].
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    atomic_write(path, &pgm_text(values, width, height)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_rect_mesh;

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join("file.txt");
        atomic_write(&path, "first").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "first");
        atomic_write(&path, "second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        // No temp litter left behind.
        let entries: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(entries, vec!["file.txt"]);
    }

    #[test]
    fn vtk_structure_and_deformed_coordinates() {
        let mesh = build_rect_mesh(2, 1, 2.0, 1.0, 0.1).unwrap();
        let mut u = vec![0.0; mesh.num_dofs()];
        // Push node 0 by (0.25, -0.5).
        u[0] = 0.25;
        u[1] = -0.5;
        let phi = vec![0.5, 0.75];
        let text = vtk_text(
            "probe",
            &mesh,
            Some(&u),
            &[CellScalar {
                name: "phi",
                values: &phi,
            }],
        )
        .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# vtk DataFile Version 3.0");
        assert_eq!(lines[1], "probe");
        assert_eq!(lines[2], "ASCII");
        assert_eq!(lines[3], "DATASET UNSTRUCTURED_GRID");
        assert_eq!(lines[4], "POINTS 6 double");
        // Node 0 sits at the origin in the reference mesh; deformed output
        // shows the displacement.
        assert_eq!(lines[5], "0.25 -0.5 0");
        let cells_at = lines.iter().position(|l| l.starts_with("CELLS")).unwrap();
        assert_eq!(lines[cells_at], "CELLS 2 10");
        // Connectivity rows echo the mesh tables.
        for (i, conn) in mesh.elements.iter().enumerate() {
            assert_eq!(
                lines[cells_at + 1 + i],
                format!("4 {} {} {} {}", conn[0], conn[1], conn[2], conn[3])
            );
        }
        let types_at = lines.iter().position(|l| l.starts_with("CELL_TYPES")).unwrap();
        assert_eq!(lines[types_at + 1], "9");
        assert_eq!(lines[types_at + 2], "9");
        let pd = lines.iter().position(|l| *l == "POINT_DATA 6").unwrap();
        assert_eq!(lines[pd + 1], "VECTORS u double");
        assert_eq!(lines[pd + 2], "0.25 -0.5 0");
        assert_eq!(lines[pd + 3], "0 0 0");
        let cd = lines.iter().position(|l| *l == "CELL_DATA 2").unwrap();
        assert_eq!(lines[cd + 1], "SCALARS phi double 1");
        assert_eq!(lines[cd + 2], "LOOKUP_TABLE default");
        assert_eq!(lines[cd + 3], "0.5");
        assert_eq!(lines[cd + 4], "0.75");
    }

    #[test]
    fn vtk_rejects_mismatched_lengths() {
        let mesh = build_rect_mesh(2, 1, 2.0, 1.0, 0.1).unwrap();
        assert!(vtk_text("t", &mesh, Some(&[0.0; 3]), &[]).is_err());
        let bad = vec![1.0; 3];
        assert!(vtk_text(
            "t",
            &mesh,
            None,
            &[CellScalar {
                name: "x",
                values: &bad
            }]
        )
        .is_err());
    }

    fn record(k: usize) -> IterationRecord {
        IterationRecord {
            iteration: k,
            objective_raw: 0.5 + k as f64,
            j_over_j0: 1.0 / (k + 1) as f64,
            constraint_values: vec![-0.25, -1.5],
            grayness: 0.5,
            tau: 3.0,
            simp_p: 1.0,
            xi: 2.0,
            loss: 1.25,
            newton_iterations: vec![12],
            retried: k == 1,
            wall_time_s: 123.4, // must not appear in the file
        }
    }

    #[test]
    fn history_csv_layout_and_timing_exclusion() {
        let labels = vec!["g_vol_gel".to_string(), "g_gray".to_string()];
        let cases = vec!["water".to_string()];
        let text = history_csv(&[record(0), record(1)], &labels, &cases).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,objective,j_over_j0,g_vol_gel,g_gray,grayness,tau,simp_p,xi,loss,newton_iters_water,retried"
        );
        assert_eq!(lines[1], "0,0.5,1,-0.25,-1.5,0.5,3,1,2,1.25,12,0");
        assert_eq!(lines[2], "1,1.5,0.5,-0.25,-1.5,0.5,3,1,2,1.25,12,1");
        assert!(!text.contains("123.4"), "wall time must stay out of the CSV");

        // Identical inputs give identical bytes.
        assert_eq!(
            text,
            history_csv(&[record(0), record(1)], &labels, &cases).unwrap()
        );
    }

    #[test]
    fn history_csv_rejects_shape_mismatches() {
        let labels = vec!["g".to_string()];
        assert!(history_csv(&[record(0)], &labels, &["a".to_string()]).is_err());
        let labels2 = vec!["a".to_string(), "b".to_string()];
        assert!(history_csv(&[record(0)], &labels2, &[]).is_err());
    }

    #[test]
    fn pgm_levels_and_shape() {
        let text = pgm_text(&[0.0, 1.0, 0.5, 0.25], 2, 2).unwrap();
        assert_eq!(text, "P2\n2 2\n255\n0 255\n128 64\n");
        // Out-of-range values clamp instead of wrapping.
        let clamped = pgm_text(&[-0.5, 1.5], 2, 1).unwrap();
        assert_eq!(clamped, "P2\n2 1\n255\n0 255\n");
        assert!(pgm_text(&[0.0; 3], 2, 2).is_err());
        assert!(pgm_text(&[f64::NAN], 1, 1).is_err());
    }
}
