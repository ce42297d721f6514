//! Document ingestion: rasterize a PDF into per-page PNGs (via a
//! configurable external command), load pre-rendered page directories,
//! and obtain multi-vector embeddings for pages through the gateway.
//!
//! Page files follow the naming scheme `{doc_id}_{page_no:04}.png`; a
//! JSON manifest sidecar records the doc id, render DPI, and pixel
//! dimensions per page.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{page_payload_id, EmbedPayload, Gateway};
use crate::retrieval::MultiVectorEmbedding;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("environment error: {0}")]
    Environment(String),
    #[error("rasterizer failed (exit {code:?}): {stderr}")]
    RasterizerFailed { code: Option<i32>, stderr: String },
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unreadable page images: {}", .0.join("; "))]
    UnreadablePages(Vec<String>),
    #[error("embedding failed for {} page(s): {}", .failures.len(),
            .failures.iter().map(|(p, m)| format!("page {p}: {m}")).collect::<Vec<_>>().join("; "))]
    EmbedFailed { failures: Vec<(u32, String)> },
    #[error("page {page_no} returned dim {got}, expected {expected}")]
    DimMismatch {
        page_no: u32,
        got: usize,
        expected: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One rendered page on disk, validated to exist and decode as PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageImage {
    pub doc_id: String,
    pub page_no: u32,
    pub path: PathBuf,
    pub width_px: u32,
    pub height_px: u32,
}

/// Lightweight reference to a page image used by the QA pipeline. Unlike
/// [`PageImage`] it does not require the file to exist: mock-backed runs
/// never read image bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRef {
    pub doc_id: String,
    pub page_no: u32,
    pub path: PathBuf,
}

impl PageRef {
    pub fn payload_id(&self) -> String {
        page_payload_id(&self.doc_id, self.page_no)
    }
}

/// The pages of one document, strictly increasing in page number (gaps
/// allowed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageSet {
    pub doc_id: String,
    pub pages: Vec<PageImage>,
}

impl PageSet {
    fn from_pages(doc_id: String, mut pages: Vec<PageImage>) -> Result<Self, IngestError> {
        pages.sort_by_key(|p| p.page_no);
        if pages.windows(2).any(|w| w[0].page_no == w[1].page_no) {
            return Err(IngestError::InvalidInput(format!(
                "duplicate page numbers in document '{doc_id}'"
            )));
        }
        Ok(Self { doc_id, pages })
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }
}

/// Manifest sidecar written next to rendered pages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PageManifest {
    pub doc_id: String,
    pub dpi: u32,
    pub pages: Vec<ManifestPage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPage {
    pub page_no: u32,
    pub file: String,
    pub width_px: u32,
    pub height_px: u32,
}

/// External rasterizer invocation. The template is split on whitespace
/// and the placeholders `{input}`, `{dpi}` and `{output}` are substituted
/// per token; `{output}` receives the output filename prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterizerConfig {
    pub command_template: String,
}

impl Default for RasterizerConfig {
    fn default() -> Self {
        Self {
            command_template: "pdftoppm -png -r {dpi} {input} {output}".into(),
        }
    }
}

pub const DEFAULT_DPI: u32 = 144;

pub fn page_file_name(doc_id: &str, page_no: u32) -> String {
    format!("{doc_id}_{page_no:04}.png")
}

/// Rasterize a PDF into `out_dir`, one PNG per page named
/// `{doc_id}_{page_no:04}.png`, plus a manifest sidecar. The doc id is
/// the PDF file stem. Rendering happens in a scratch directory and moves
/// into place only on success, so a failed run leaves no partial pages.
pub fn rasterize_document(
    pdf_path: &Path,
    out_dir: &Path,
    dpi: u32,
    rasterizer: &RasterizerConfig,
) -> Result<PageSet, IngestError> {
    if !pdf_path.is_file() {
        return Err(IngestError::NotFound(format!(
            "pdf not found: {}",
            pdf_path.display()
        )));
    }
    let doc_id = pdf_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| IngestError::InvalidInput("pdf path has no usable file stem".into()))?
        .to_string();
    fs::create_dir_all(out_dir)?;
    let scratch = tempfile::tempdir_in(out_dir)?;
    let prefix = scratch.path().join(&doc_id);

    let tokens: Vec<String> = rasterizer
        .command_template
        .split_whitespace()
        .map(|t| {
            t.replace("{input}", &pdf_path.to_string_lossy())
                .replace("{dpi}", &dpi.to_string())
                .replace("{output}", &prefix.to_string_lossy())
        })
        .collect();
    let (program, args) = tokens
        .split_first()
        .ok_or_else(|| IngestError::InvalidInput("empty rasterizer command template".into()))?;

    let output = Command::new(program).args(args).output().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IngestError::Environment(format!(
                "rasterizer command '{program}' not found; install it or point \
                 the rasterizer command template at another PDF-to-PNG tool"
            ))
        } else {
            IngestError::Environment(format!("cannot run rasterizer '{program}': {e}"))
        }
    })?;
    if !output.status.success() {
        return Err(IngestError::RasterizerFailed {
            code: output.status.code(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }

    // Collect scratch outputs; the page number is the trailing integer in
    // the produced file name (pdftoppm-style `prefix-NN.png`).
    let trailing_no = Regex::new(r"(\d+)\.png$").expect("static regex");
    let mut produced: Vec<(u32, PathBuf)> = Vec::new();
    for entry in fs::read_dir(scratch.path())? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(caps) = trailing_no.captures(name) {
            let page_no: u32 = caps[1].parse().map_err(|_| {
                IngestError::Ingest(format!("unparseable page number in '{name}'"))
            })?;
            produced.push((page_no, path));
        }
    }
    if produced.is_empty() {
        return Err(IngestError::Ingest(format!(
            "rasterizer produced no pages for {}",
            pdf_path.display()
        )));
    }
    produced.sort_by_key(|(n, _)| *n);

    let mut pages = Vec::with_capacity(produced.len());
    for (page_no, scratch_path) in produced {
        let final_path = out_dir.join(page_file_name(&doc_id, page_no));
        fs::rename(&scratch_path, &final_path)?;
        let (width_px, height_px) = png_dimensions(&final_path)?;
        pages.push(PageImage {
            doc_id: doc_id.clone(),
            page_no,
            path: final_path,
            width_px,
            height_px,
        });
    }
    let set = PageSet::from_pages(doc_id.clone(), pages)?;

    let manifest = PageManifest {
        doc_id: doc_id.clone(),
        dpi,
        pages: set
            .pages
            .iter()
            .map(|p| ManifestPage {
                page_no: p.page_no,
                file: page_file_name(&doc_id, p.page_no),
                width_px: p.width_px,
                height_px: p.height_px,
            })
            .collect(),
    };
    fs::write(
        out_dir.join(format!("{doc_id}.manifest.json")),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| IngestError::Ingest(e.to_string()))?,
    )?;
    Ok(set)
}

fn png_dimensions(path: &Path) -> Result<(u32, u32), IngestError> {
    let img = image::ImageReader::open(path)
        .map_err(|e| IngestError::Ingest(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| IngestError::Ingest(format!("{}: {e}", path.display())))?;
    Ok((img.width(), img.height()))
}

/// Load the pre-rendered pages of one document from a directory. Files
/// that match the naming scheme but fail to decode are all reported.
pub fn load_page_set(dir: &Path, doc_id: &str) -> Result<PageSet, IngestError> {
    let pattern = Regex::new(&format!(
        "^{}_([0-9]{{4}})\\.png$",
        regex::escape(doc_id)
    ))
    .expect("escaped doc_id regex");
    let mut pages = Vec::new();
    let mut bad = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| {
        IngestError::NotFound(format!("cannot read directory {}: {e}", dir.display()))
    })? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(caps) = pattern.captures(name) else {
            continue;
        };
        let page_no: u32 = caps[1].parse().expect("four digits");
        match png_dimensions(&path) {
            Ok((width_px, height_px)) => pages.push(PageImage {
                doc_id: doc_id.to_string(),
                page_no,
                path,
                width_px,
                height_px,
            }),
            Err(e) => bad.push(e.to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(IngestError::UnreadablePages(bad));
    }
    if pages.is_empty() {
        return Err(IngestError::NotFound(format!(
            "no pages matching {doc_id}_NNNN.png in {}",
            dir.display()
        )));
    }
    PageSet::from_pages(doc_id.to_string(), pages)
}

/// Doc ids present in a page directory, from file names.
pub fn list_doc_ids(dir: &Path) -> Result<Vec<String>, IngestError> {
    let pattern = Regex::new(r"^(.+)_([0-9]{4})\.png$").expect("static regex");
    let mut ids = std::collections::BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| {
        IngestError::NotFound(format!("cannot read directory {}: {e}", dir.display()))
    })? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(caps) = pattern.captures(name) {
            ids.insert(caps[1].to_string());
        }
    }
    Ok(ids.into_iter().collect())
}

/// Embed every page of a set through the gateway, preserving order. All
/// failures are gathered into one report; a dimension change mid-set
/// fails immediately naming the offending page.
pub fn embed_pages(
    gateway: &Gateway,
    pages: &PageSet,
) -> Result<Vec<(PageImage, MultiVectorEmbedding)>, IngestError> {
    if pages.is_empty() {
        return Err(IngestError::InvalidInput(format!(
            "page set for '{}' is empty",
            pages.doc_id
        )));
    }
    let mut out = Vec::with_capacity(pages.len());
    let mut failures = Vec::new();
    let mut expected_dim = None;
    for page in &pages.pages {
        let payload = EmbedPayload::Image {
            id: page_payload_id(&page.doc_id, page.page_no),
            path: page.path.clone(),
        };
        match gateway.embed_multivector(&payload) {
            Ok(embedding) => {
                let dim = embedding.dim();
                match expected_dim {
                    None => expected_dim = Some(dim),
                    Some(expected) if expected != dim => {
                        return Err(IngestError::DimMismatch {
                            page_no: page.page_no,
                            got: dim,
                            expected,
                        });
                    }
                    _ => {}
                }
                out.push((page.clone(), embedding));
            }
            Err(e) => failures.push((page.page_no, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(IngestError::EmbedFailed { failures });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Scenario;

    pub(crate) fn write_png(path: &Path, w: u32, h: u32) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([200, 200, 200]));
        img.save(path).unwrap();
    }

    #[test]
    fn load_page_set_sorted_with_gaps() {
        let dir = tempfile::tempdir().unwrap();
        for n in [2u32, 9, 5] {
            write_png(&dir.path().join(page_file_name("doc", n)), 10, 12);
        }
        write_png(&dir.path().join("other_0001.png"), 4, 4);
        let set = load_page_set(dir.path(), "doc").unwrap();
        assert_eq!(
            set.pages.iter().map(|p| p.page_no).collect::<Vec<_>>(),
            vec![2, 5, 9]
        );
        assert_eq!(set.pages[0].width_px, 10);
    }

    #[test]
    fn load_page_set_reports_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join(page_file_name("doc", 1)), 8, 8);
        fs::write(dir.path().join(page_file_name("doc", 2)), b"not a png").unwrap();
        let err = load_page_set(dir.path(), "doc").unwrap_err();
        match err {
            IngestError::UnreadablePages(bad) => {
                assert_eq!(bad.len(), 1);
                assert!(bad[0].contains("doc_0002.png"));
            }
            other => panic!("expected UnreadablePages, got {other:?}"),
        }
    }

    #[test]
    fn load_page_set_missing_dir_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_page_set(&dir.path().join("nope"), "doc"),
            Err(IngestError::NotFound(_))
        ));
        assert!(matches!(
            load_page_set(dir.path(), "doc"),
            Err(IngestError::NotFound(_))
        ));
    }

    #[test]
    fn list_doc_ids_groups_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a_0001.png"), 4, 4);
        write_png(&dir.path().join("a_0002.png"), 4, 4);
        write_png(&dir.path().join("b_report_0001.png"), 4, 4);
        assert_eq!(list_doc_ids(dir.path()).unwrap(), vec!["a", "b_report"]);
    }

    #[test]
    fn embed_pages_preserves_order_and_reports_failures() {
        let dir = tempfile::tempdir().unwrap();
        for n in [1u32, 2, 3] {
            write_png(&dir.path().join(page_file_name("doc", n)), 6, 6);
        }
        let set = load_page_set(dir.path(), "doc").unwrap();

        let mut scenario = Scenario::new("s");
        scenario.script_embedding(page_payload_id("doc", 1), vec![vec![0.6, 0.8]]);
        scenario.script_embedding(page_payload_id("doc", 2), vec![vec![1.0, 0.0]]);
        scenario.script_embedding(page_payload_id("doc", 3), vec![vec![0.0, 1.0]]);
        let gw = Gateway::with_mock(scenario.clone());
        let embedded = embed_pages(&gw, &set).unwrap();
        assert_eq!(embedded.len(), 3);
        assert_eq!(
            embedded.iter().map(|(p, _)| p.page_no).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );

        // Missing fixture for page 2 -> partial failure report naming it.
        let mut partial = Scenario::new("s2");
        partial.script_embedding(page_payload_id("doc", 1), vec![vec![0.6, 0.8]]);
        partial.script_embedding(page_payload_id("doc", 3), vec![vec![0.0, 1.0]]);
        let err = embed_pages(&Gateway::with_mock(partial), &set).unwrap_err();
        match err {
            IngestError::EmbedFailed { failures } => {
                assert_eq!(failures.len(), 1);
                assert_eq!(failures[0].0, 2);
            }
            other => panic!("expected EmbedFailed, got {other:?}"),
        }

        // Dim change mid-set names the offending page.
        let mut mixed = scenario;
        mixed.script_embedding(page_payload_id("doc", 2), vec![vec![1.0, 0.0, 0.0]]);
        let err = embed_pages(&Gateway::with_mock(mixed), &set).unwrap_err();
        assert!(matches!(err, IngestError::DimMismatch { page_no: 2, .. }));
    }

    #[test]
    fn embed_pages_rejects_empty_set() {
        let set = PageSet {
            doc_id: "doc".into(),
            pages: vec![],
        };
        let gw = Gateway::with_mock(Scenario::new("s"));
        assert!(matches!(
            embed_pages(&gw, &set),
            Err(IngestError::InvalidInput(_))
        ));
    }

    #[test]
    fn rasterize_with_fake_command() {
        // A stand-in rasterizer: copies a fixture PNG to {output}-N.png.
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("fakeraster.sh");
        fs::write(
            &script,
            "#!/bin/sh\n\
             # args: input output_prefix\n\
             for n in 1 2 3; do cp \"$1\" \"$2-$n.png\"; done\n",
        )
        .unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
        }
        let fixture = dir.path().join("page.png");
        write_png(&fixture, 20, 30);
        let pdf = dir.path().join("report.pdf");
        fs::write(&pdf, b"%PDF-stub").unwrap();

        let out = dir.path().join("out");
        let cfg = RasterizerConfig {
            command_template: format!("{} {} {{output}}", script.display(), fixture.display()),
        };
        let set = rasterize_document(&pdf, &out, DEFAULT_DPI, &cfg).unwrap();
        assert_eq!(set.doc_id, "report");
        assert_eq!(set.len(), 3);
        assert!(out.join("report_0001.png").is_file());
        assert!(out.join("report.manifest.json").is_file());

        // Rerun is idempotent: same names, overwritten in place.
        let set2 = rasterize_document(&pdf, &out, DEFAULT_DPI, &cfg).unwrap();
        assert_eq!(set.pages.len(), set2.pages.len());
        let reloaded = load_page_set(&out, "report").unwrap();
        assert_eq!(reloaded.pages.len(), 3);
    }

    #[test]
    fn rasterize_failure_paths() {
        let dir = tempfile::tempdir().unwrap();
        let pdf = dir.path().join("doc.pdf");
        fs::write(&pdf, b"%PDF-stub").unwrap();
        let out = dir.path().join("out");

        // Missing binary -> environment error with a hint.
        let cfg = RasterizerConfig {
            command_template: "definitely-not-a-rasterizer {input} {output}".into(),
        };
        match rasterize_document(&pdf, &out, 144, &cfg) {
            Err(IngestError::Environment(msg)) => assert!(msg.contains("not found")),
            other => panic!("expected Environment, got {other:?}"),
        }

        // Nonzero exit -> rasterizer error carrying stderr.
        let failing = dir.path().join("fail.sh");
        fs::write(&failing, "#!/bin/sh\necho 'corrupt pdf' >&2\nexit 3\n").unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&failing, fs::Permissions::from_mode(0o755)).unwrap();
        }
        let cfg = RasterizerConfig {
            command_template: format!("{} {{input}} {{output}}", failing.display()),
        };
        match rasterize_document(&pdf, &out, 144, &cfg) {
            Err(IngestError::RasterizerFailed { code, stderr }) => {
                assert_eq!(code, Some(3));
                assert!(stderr.contains("corrupt pdf"));
            }
            other => panic!("expected RasterizerFailed, got {other:?}"),
        }

        // Zero pages produced -> ingest error, no partial output.
        let noop = dir.path().join("noop.sh");
        fs::write(&noop, "#!/bin/sh\nexit 0\n").unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&noop, fs::Permissions::from_mode(0o755)).unwrap();
        }
        let cfg = RasterizerConfig {
            command_template: format!("{} {{input}} {{output}}", noop.display()),
        };
        assert!(matches!(
            rasterize_document(&pdf, &out, 144, &cfg),
            Err(IngestError::Ingest(_))
        ));
        let leftover: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().map(|x| x == "png").unwrap_or(false))
            .collect();
        assert!(leftover.is_empty(), "no partial pages expected");
    }
}
