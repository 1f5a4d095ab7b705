//! Wire encodings checked against hand-assembled packets.

use ccnx_migrate_core::wire::{
    compute_object_hash, decode_content_object, decode_interest, encode_content_object,
    encode_interest, match_restrictions,
};
use ccnx_migrate_core::{ContentObject, Hash256, Interest, Name, NamedAddress};

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    let digits: String = text.chars().filter(|c| c.is_ascii_hexdigit()).collect();
    (0..digits.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&digits[i..i + 2], 16).unwrap())
        .collect()
}

fn name(s: &str) -> Name {
    Name::parse(s).unwrap()
}

#[test]
fn named_object_matches_fixture() {
    let obj = ContentObject::named(name("/a/b"), b"hi".to_vec());
    let bytes = fixture("object_named_a_b.hex");
    assert_eq!(encode_content_object(&obj).unwrap(), bytes);
    assert_eq!(decode_content_object(&bytes).unwrap(), obj);
}

#[test]
fn nameless_object_matches_fixture() {
    let obj = ContentObject::nameless(b"hi".to_vec());
    let bytes = fixture("object_nameless_hi.hex");
    assert_eq!(bytes.len(), 2 + 16);
    assert_eq!(encode_content_object(&obj).unwrap(), bytes);
    assert_eq!(decode_content_object(&bytes).unwrap(), obj);
}

#[test]
fn hash_restricted_interest_matches_fixture() {
    let i = Interest::new(NamedAddress::hashed(name("/a/b"), Hash256([0x11; 32])));
    let bytes = fixture("interest_a_b_hash11.hex");
    assert_eq!(encode_interest(&i).unwrap(), bytes);
    assert_eq!(decode_interest(&bytes).unwrap(), i);
    assert_eq!(i.encoded_len(), bytes.len());
}

#[test]
fn zero_page_golden_hash() {
    let obj = ContentObject::nameless(vec![0u8; 512]);
    assert_eq!(
        compute_object_hash(&obj).unwrap().to_string(),
        "13058676f8c9abef321b61e04962d7fba216594a426260d94591f4d89484a662"
    );
}

#[test]
fn nameless_object_answers_prefix_plus_hash() {
    let obj = ContentObject::nameless(vec![7u8; 64]);
    let h = compute_object_hash(&obj).unwrap();
    let good = Interest::new(NamedAddress::hashed(name("/vm/checkpoint/ver=1/ram"), h));
    let bad = Interest::new(NamedAddress::hashed(
        name("/vm/checkpoint/ver=1/ram"),
        Hash256([0; 32]),
    ));
    assert!(match_restrictions(&good, &obj));
    assert!(!match_restrictions(&bad, &obj));
    assert!(!match_restrictions(&Interest::for_name(name("/vm")), &obj));
}
