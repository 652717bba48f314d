mod common;

use std::collections::BTreeSet;

use dermlens_core::raster::RgbRaster;
use dermlens_core::{filter_cases, Split};

#[test]
fn fixture_shape() {
    let m = common::manifest();
    assert_eq!(m.cases.len(), 12);
    assert_eq!(m.classes.len(), 3);
    assert_eq!(m.vocabulary.len(), 7);
    assert_eq!(filter_cases(&m, Split::Test, &BTreeSet::new()).len(), 12);
    let noise = BTreeSet::from(["noise".to_string()]);
    assert_eq!(filter_cases(&m, Split::Test, &noise).len(), 4);
    assert!(filter_cases(&m, Split::Train, &BTreeSet::new()).is_empty());
    for case in &m.cases {
        assert!(!(case.tags.contains("noise") && case.tags.contains("ambiguous")));
        assert_eq!(case.true_concepts.as_ref().unwrap().len(), 7);
    }
}

#[test]
fn fixture_images_decode_to_8x8() {
    let m = common::manifest();
    for case in &m.cases {
        let img = RgbRaster::open(&m.resolve_image(case)).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8), "{}", case.case_id);
    }
    let first = RgbRaster::open(&m.resolve_image(&m.cases[0])).unwrap();
    assert_eq!(first, RgbRaster::checkerboard(8, 8));
}
