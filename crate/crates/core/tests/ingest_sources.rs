use std::fs;
use std::path::PathBuf;

use fusionkit_core::ingest::{chunk_document, load_source, reassemble_chunks, IngestError, DEFAULT_MAX_UNITS, DEFAULT_OVERLAP};
use fusionkit_core::{Lang, SourceKind};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

#[test]
fn three_files_give_three_documents() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("b.txt"), "The tokamak confines plasma with magnetic fields.").unwrap();
    fs::write(dir.path().join("a.txt"), "托卡马克利用磁场约束高温等离子体。").unwrap();
    fs::write(dir.path().join("c.txt"), "Pellet injection fuels the plasma core.").unwrap();
    fs::write(dir.path().join("notes.md"), "ignored").unwrap();
    let docs: Vec<_> = load_source(dir.path(), SourceKind::Ebook).unwrap().collect::<Result<_, _>>().unwrap();
    let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids, ["ebook/a.txt", "ebook/b.txt", "ebook/c.txt"]);
    assert_eq!(docs[0].lang, Lang::Zh);
    assert_eq!(docs[1].lang, Lang::En);
}

#[test]
fn empty_directory_gives_nothing() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_source(dir.path(), SourceKind::Arxiv).unwrap().count(), 0);
}

#[test]
fn missing_path_is_unreadable() {
    let err = load_source("/nonexistent/fusion/corpus", SourceKind::Cnki).unwrap_err();
    assert!(matches!(err, IngestError::UnreadablePath { .. }));
}

#[test]
fn binary_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blob.txt"), [0xff_u8, 0xfe, 0x00, 0x81, 0x82, 0x83, b'a']).unwrap();
    let first = load_source(dir.path(), SourceKind::Ebook).unwrap().next().unwrap();
    assert!(matches!(first, Err(IngestError::UndecodableText { .. })));
}

#[test]
fn crawl_dump_yields_one_document_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let dump = "First page about divertors.\n---RECORD---\n\n---RECORD---\n第三页介绍偏滤器。\n";
    fs::write(dir.path().join("dump.txt"), dump).unwrap();
    let docs: Vec<_> = load_source(dir.path(), SourceKind::Commoncrawl).unwrap().collect::<Result<_, _>>().unwrap();
    let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids, ["commoncrawl/dump.txt#0", "commoncrawl/dump.txt#2"]);
    assert_eq!(docs[1].meta["record"], "2");
}

#[test]
fn bundled_corpus_loads_and_chunks_losslessly() {
    let mut total = 0;
    for kind in SourceKind::ALL {
        let docs: Vec<_> = load_source(fixtures().join(kind.name()), kind).unwrap().collect::<Result<_, _>>().unwrap();
        assert!(!docs.is_empty(), "{kind} fixture is empty");
        for doc in &docs {
            assert_eq!(doc.source, kind);
            let chunks = chunk_document(doc, DEFAULT_MAX_UNITS, DEFAULT_OVERLAP).unwrap();
            assert!(chunks.iter().all(|c| c.unit_count <= DEFAULT_MAX_UNITS));
            assert_eq!(reassemble_chunks(&chunks), doc.text);
        }
        total += docs.len();
    }
    // 10 crawl dumps of 25 records each plus 40 single-document files
    assert_eq!(total, 290);
}
