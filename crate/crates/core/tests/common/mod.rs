#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use chair_eval::annotations::{
    build_ground_truth, load_captions, load_instances, load_results, CaptionRecord, GroundTruthIndex,
    ReferenceSet, SegmentationRecord,
};
use chair_eval::annotations::ImageId;
use chair_eval::lexicon::ObjectVocabulary;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_str(name: &str) -> String {
    fixture(name).to_str().unwrap().to_owned()
}

pub struct Corpus {
    pub vocab: ObjectVocabulary,
    pub segs: BTreeMap<ImageId, SegmentationRecord>,
    pub refs: BTreeMap<ImageId, ReferenceSet>,
    pub gt: GroundTruthIndex,
    pub records: Vec<CaptionRecord>,
}

pub fn load_fixture() -> Corpus {
    let vocab = ObjectVocabulary::standard();
    let segs = load_instances(&fixture("instances.json"), &vocab).unwrap();
    let refs = load_captions(&fixture("captions.json")).unwrap().references;
    let gt = build_ground_truth(&segs, &refs, &vocab);
    let records = load_results(&fixture("results.json")).unwrap();
    Corpus { vocab, segs, refs, gt, records }
}
