use proptest::prelude::*;
use rmipn_core::dataio::image::{pgm_bytes, ppm_bytes};
use rmipn_core::dataio::synth::MIN_SIDE;
use rmipn_core::dataio::{
    parse_annotations, read_pgm, read_ppm, synth_sample, Annotation, GrayImage, RgbImage, ShapeKind, SynthConfig,
};
use rmipn_core::evalkit::polygon_iou;
use rmipn_core::geometry::{Point2, Polygon};
use rmipn_core::labelgen::{render_foreground, Dims};

#[test]
fn synthetic_instances_are_disjoint_large_and_pixel_consistent() {
    let cfg = SynthConfig::default();
    for seed in 0..100 {
        let s = synth_sample("s", seed, &cfg).unwrap();
        let polys = &s.annotation.polygons;
        assert!(!polys.is_empty());
        for i in 0..polys.len() {
            for j in i + 1..polys.len() {
                assert_eq!(polygon_iou(&polys[i], &polys[j]), 0.0, "seed {seed}: {i} and {j} overlap");
            }
        }
        for (p, kind) in polys.iter().zip(&s.kinds) {
            if *kind == ShapeKind::Rect {
                let shortest = p.edges().map(|(a, b)| a.dist(b)).fold(f64::INFINITY, f64::min);
                assert!(shortest >= MIN_SIDE, "seed {seed}: side {shortest}");
            }
        }

        let fg = render_foreground(polys, s.image.dims).raster;
        let (mut bright, mut covered) = (0usize, 0usize);
        for p in polys {
            let (lo, hi) = p.bbox();
            for row in lo.y.floor() as usize..(hi.y.ceil() as usize).min(cfg.height) {
                for col in lo.x.floor() as usize..(hi.x.ceil() as usize).min(cfg.width) {
                    let [r, g, b] = s.image.get(row, col);
                    if (u32::from(r) + u32::from(g) + u32::from(b)) > 3 * 140 {
                        bright += 1;
                        covered += usize::from(fg.get(row, col) > 0.0);
                    }
                }
            }
        }
        assert!(covered as f64 >= 0.95 * bright as f64, "seed {seed}: {covered}/{bright} bright pixels covered");
    }
}

#[test]
fn rectangles_only_when_bands_are_off() {
    let cfg = SynthConfig { band_prob: 0.0, ..Default::default() };
    for seed in 0..20 {
        let s = synth_sample("s", seed, &cfg).unwrap();
        assert!(s.kinds.iter().all(|k| *k == ShapeKind::Rect));
        assert!(s.annotation.polygons.iter().all(|p| p.len() == 4));
    }
}

#[test]
fn readers_reject_trailing_bytes() {
    let img = RgbImage::new(Dims::new(2, 3));
    let mut bytes = ppm_bytes(&img);
    assert_eq!(read_ppm(&bytes).unwrap(), img);
    bytes.push(0);
    assert!(read_ppm(&bytes).is_err());
    let gray = GrayImage { dims: Dims::new(2, 2), data: vec![1, 2, 3, 4] };
    let mut bytes = pgm_bytes(&gray);
    bytes.extend_from_slice(b"junk");
    assert!(read_pgm(&bytes).is_err());
}

fn polygon_strategy() -> impl Strategy<Value = Polygon> {
    // Star-shaped around a center, so always simple.
    (0.0f64..200.0, 0.0f64..200.0, prop::collection::vec(1.0f64..40.0, 3..9)).prop_map(|(cx, cy, radii)| {
        let n = radii.len();
        let pts = radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                // quarter-pixel grid keeps the text form short
                let q = |v: f64| (v * 4.0).round() / 4.0;
                Point2::new(q(cx + r * a.cos()), q(cy + r * a.sin()))
            })
            .collect();
        Polygon::new(pts).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn annotation_text_round_trips(
        polys in prop::collection::vec(polygon_strategy(), 0..5),
        words in prop::collection::vec("[a-zA-Z#][a-zA-Z0-9 ,#]{0,12}", 5),
    ) {
        let transcriptions = words[..polys.len()].to_vec();
        let ann = Annotation { image_id: "img".into(), polygons: polys, transcriptions };
        let (back, errors) = parse_annotations("img", &ann.to_text());
        prop_assert!(errors.is_empty(), "{errors:?}");
        prop_assert_eq!(back.to_text(), ann.to_text());
        prop_assert_eq!(back, ann);
    }

    #[test]
    fn ppm_and_pgm_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 56) as u8
        };
        let rgb = RgbImage { dims: Dims::new(h, w), data: (0..3 * h * w).map(|_| next()).collect() };
        prop_assert_eq!(read_ppm(&ppm_bytes(&rgb)).unwrap(), rgb);
        let gray = GrayImage { dims: Dims::new(h, w), data: (0..h * w).map(|_| next()).collect() };
        prop_assert_eq!(read_pgm(&pgm_bytes(&gray)).unwrap(), gray);
    }
}
