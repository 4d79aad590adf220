mod common;

use proptest::prelude::*;
use shapegene::genecore::*;
use shapegene::labelspace::{Part, PART_COUNT};
use shapegene::netzoo::Decoder;

fn gene_pair() -> impl Strategy<Value = (FaceShapeGene, FaceShapeGene, usize)> {
    (1usize..12).prop_flat_map(|d| {
        (
            prop::collection::vec(-100.0f32..100.0, PART_COUNT * d),
            prop::collection::vec(-100.0f32..100.0, PART_COUNT * d),
            0..PART_COUNT,
        )
            .prop_map(move |(a, b, p)| (FaceShapeGene::new(d, a).unwrap(), FaceShapeGene::new(d, b).unwrap(), p))
    })
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn replace_touches_exactly_one_slot((a, b, p) in gene_pair()) {
        let part = Part::from_index(p).unwrap();
        let r = replace_slot(&a, &b, part).unwrap();
        let d = a.slot_dim();
        // index bookkeeping by hand
        for k in 0..PART_COUNT * d {
            let src = if k / d == p { &b } else { &a };
            prop_assert_eq!(r.values()[k].to_bits(), src.values()[k].to_bits());
        }
        prop_assert_eq!(bits(replace_slot(&a, &a, part).unwrap().values()), bits(a.values()));
        prop_assert_eq!(bits(replace_slot(&r, &a, part).unwrap().values()), bits(a.values()));
    }

    #[test]
    fn interpolation_endpoints_and_locality((a, b, p) in gene_pair(), alpha in 0.0f64..=1.0) {
        let part = Part::from_index(p).unwrap();
        prop_assert_eq!(bits(interpolate_slot(&a, &b, part, 0.0).unwrap().values()), bits(a.values()));
        prop_assert_eq!(
            bits(interpolate_slot(&a, &b, part, 1.0).unwrap().values()),
            bits(replace_slot(&a, &b, part).unwrap().values())
        );
        let m = interpolate_slot(&a, &b, part, alpha).unwrap();
        for q in Part::ALL.into_iter().filter(|&q| q != part) {
            prop_assert_eq!(bits(m.slot(q)), bits(a.slot(q)));
        }
        for (k, v) in m.slot(part).iter().enumerate() {
            let (x, y) = (a.slot(part)[k], b.slot(part)[k]);
            prop_assert!(*v >= x.min(y) - 1e-3 && *v <= x.max(y) + 1e-3);
        }
    }

    #[test]
    fn gene_bytes_round_trip((a, _b, _p) in gene_pair()) {
        let back = FaceShapeGene::from_bytes(&a.to_bytes()).unwrap();
        prop_assert_eq!(bits(back.values()), bits(a.values()));
        prop_assert_eq!(back.slot_dim(), a.slot_dim());
    }
}

#[test]
fn midpoint_of_zero_and_two_is_one() {
    let a = FaceShapeGene::new(3, vec![0.0; 21]).unwrap();
    let b = FaceShapeGene::new(3, vec![2.0; 21]).unwrap();
    for part in Part::ALL {
        let m = interpolate_slot(&a, &b, part, 0.5).unwrap();
        assert!(m.slot(part).iter().all(|&v| v == 1.0));
    }
    assert!(interpolate_slot(&a, &b, Part::Hair, 1.5).is_err());
    assert!(interpolate_slot(&a, &b, Part::Hair, -0.1).is_err());
}

#[test]
fn mismatched_and_invalid_genes_are_rejected() {
    let a = FaceShapeGene::new(3, vec![0.0; 21]).unwrap();
    let b = FaceShapeGene::new(4, vec![0.0; 28]).unwrap();
    assert!(replace_slot(&a, &b, Part::Nose).is_err());
    assert!(FaceShapeGene::new(3, vec![0.0; 20]).is_err());
    assert!(FaceShapeGene::new(1, vec![f32::NAN; 7]).is_err());
    let mut bytes = a.to_bytes();
    bytes[0] ^= 0xff;
    assert!(FaceShapeGene::from_bytes(&bytes).is_err());
    assert!(FaceShapeGene::from_bytes(&a.to_bytes()[..10]).is_err());
}

#[test]
fn gene_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = FaceShapeGene::new(2, (0..14).map(|i| i as f32 * 0.5).collect()).unwrap();
    let path = dir.path().join("g.bin");
    g.save(&path).unwrap();
    assert_eq!(FaceShapeGene::load(&path).unwrap().values(), g.values());
}

#[test]
fn encoding_and_decoding_contracts() {
    let cfg = common::tiny(32);
    let encoders = PartEncoders::<f32>::new(&cfg, 1).unwrap();
    let decoder = Decoder::<f32>::overall(&cfg, 2).unwrap();
    let spec = shapegene::synthgen::sample_spec(3, 4).unwrap();
    let (face, _) = shapegene::synthgen::render(&spec, 32).unwrap();
    let g = encode_gene(&encoders, &face).unwrap();
    assert_eq!(g.len(), 7 * cfg.gene_slot_dim);
    assert_eq!(bits(encode_gene(&encoders, &face).unwrap().values()), bits(g.values()));

    let other = shapegene::synthgen::render(&shapegene::synthgen::sample_spec(4, 4).unwrap(), 32).unwrap().0;
    let h = encode_gene(&encoders, &other).unwrap();
    let y = decode_gene(&decoder, &g).unwrap();
    let y0 = decode_gene(&decoder, &interpolate_slot(&g, &h, Part::Eyes, 0.0).unwrap()).unwrap();
    assert_eq!(y.image().data(), y0.image().data());
    assert!(y.image().data().iter().all(|v| (0.0..=1.0).contains(v)));

    let out = remix(
        &encoders,
        &decoder,
        &RemixRequest {
            receptor: GeneSource::Image(face.clone()),
            donor: GeneSource::Image(other.clone()),
            part: Part::Hair,
            alpha: 1.0,
        },
    )
    .unwrap();
    assert_eq!(bits(out.gene.values()), bits(replace_slot(&g, &h, Part::Hair).unwrap().values()));

    let same = remix(
        &encoders,
        &decoder,
        &RemixRequest {
            receptor: GeneSource::Image(face.clone()),
            donor: GeneSource::Image(face.clone()),
            part: Part::Mouth,
            alpha: 1.0,
        },
    )
    .unwrap();
    let q = shapegene::labelspace::quantize;
    assert_eq!(q(same.label.image()), q(y.image()));

    let wrong = shapegene::image::Image::filled(16, [0.5; 3]);
    assert!(encode_gene(&encoders, &wrong).is_err());
}
