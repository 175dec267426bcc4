use std::io::{BufRead, BufReader, Read, Write};

use ndarray::Array2;

use super::{ComponentGraph, DistanceMatrix, GraphError};
use crate::decompose::ComponentKind;

fn write_square<W: Write, T: std::fmt::Display>(
    mut out: W,
    names: &[String],
    m: &Array2<T>,
) -> Result<(), GraphError> {
    writeln!(out, "{}", names.join(","))?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Writes the 0/1 adjacency with a header row of channel names.
pub fn write_adjacency_csv<W: Write>(out: W, names: &[String], graph: &ComponentGraph) -> Result<(), GraphError> {
    write_square(out, names, &graph.adjacency)
}

pub fn write_distance_csv<W: Write>(out: W, names: &[String], dist: &DistanceMatrix) -> Result<(), GraphError> {
    write_square(out, names, &dist.values)
}

pub fn read_adjacency_csv<R: Read>(input: R, kind: ComponentKind) -> Result<ComponentGraph, GraphError> {
    let mut lines = BufReader::new(input)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.starts_with('#')));
    let header = lines.next().ok_or_else(|| GraphError::Format("empty adjacency file".into()))??;
    let d = header.split(',').count();
    let mut adjacency = Array2::zeros((d, d));
    let mut rows = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if rows >= d {
            return Err(GraphError::Format(format!("more than {d} adjacency rows")));
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d {
            return Err(GraphError::Format(format!("row {rows} has {} cells, expected {d}", cells.len())));
        }
        for (j, c) in cells.iter().enumerate() {
            adjacency[[rows, j]] = match c.trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(GraphError::Format(format!("adjacency entry {other:?}"))),
            };
        }
        rows += 1;
    }
    if rows != d {
        return Err(GraphError::Format(format!("{rows} adjacency rows, expected {d}")));
    }
    Ok(ComponentGraph { adjacency, kind })
}

/// One `src,dst` line per edge after a `src,dst` header.
pub fn write_edge_list<W: Write>(mut out: W, graph: &ComponentGraph) -> Result<(), GraphError> {
    writeln!(out, "src,dst")?;
    for (i, j) in graph.edges() {
        writeln!(out, "{i},{j}")?;
    }
    Ok(())
}

pub fn read_edge_list<R: Read>(input: R, nodes: usize, kind: ComponentKind) -> Result<ComponentGraph, GraphError> {
    let mut edges = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == "src,dst" {
            continue;
        }
        let parse = |s: Option<&str>| -> Result<usize, GraphError> {
            s.and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| GraphError::Format(format!("line {}: {line:?}", n + 1)))
        };
        let mut parts = line.split(',');
        edges.push((parse(parts.next())?, parse(parts.next())?));
    }
    ComponentGraph::from_edges(nodes, kind, &edges)
}
