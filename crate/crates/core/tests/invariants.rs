use mangaflow::geometry::{greedy_match, iou, multi_cover_area, reading_order, union_area, Rect};
use mangaflow::layout::{project, Layout, LayoutConstraints, Panel};
use mangaflow::lettering::{candidates, place_bubbles, AnchorBox, AnchorKind};
use mangaflow::metabench::{layout_metrics, occm, OCCM_EPSILON};
use mangaflow::story::{BubbleKind, DialogueLine, PanelCounts, ProjectConfig};
use proptest::prelude::*;

const G: u32 = 64;

/// A rectangle with edges on a `G x G` grid.
fn grid_rect() -> impl Strategy<Value = Rect> {
    (0..G, 0..G, 0..G, 0..G).prop_map(|(a, b, c, d)| {
        let (l, r) = (a.min(b), a.max(b) + 1);
        let (t, u) = (c.min(d), c.max(d) + 1);
        let g = |v: u32| v.min(G) as f64 / G as f64;
        Rect::from_edges(g(l), g(t), g(r), g(u)).unwrap()
    })
}

fn free_rect() -> impl Strategy<Value = Rect> {
    (0.0f64..0.9, 0.0f64..0.9, 0.02f64..1.0, 0.02f64..1.0).prop_map(|(x, y, w, h)| Rect {
        x,
        y,
        w: w.min(1.0 - x),
        h: h.min(1.0 - y),
    })
}

fn cells(rects: &[Rect], min_count: usize) -> f64 {
    let idx = |v: f64| (v * G as f64).round() as usize;
    let mut n = vec![0usize; (G * G) as usize];
    for r in rects {
        for y in idx(r.y)..idx(r.bottom()) {
            for x in idx(r.x)..idx(r.right()) {
                n[y * G as usize + x] += 1;
            }
        }
    }
    n.iter().filter(|&&c| c >= min_count).count() as f64 / (G * G) as f64
}

fn exhaustive(t: &[Rect], g: &[Rect]) -> Vec<(usize, usize)> {
    let (mut ut, mut ug, mut out) = (vec![false; t.len()], vec![false; g.len()], vec![]);
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..t.len()).filter(|&i| !ut[i]) {
            for j in (0..g.len()).filter(|&j| !ug[j]) {
                let v = iou(&t[i], &g[j]);
                if v > 0.0 && best.is_none_or(|b| v > b.0) {
                    best = Some((v, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { return out };
        ut[i] = true;
        ug[j] = true;
        out.push((i, j));
    }
}

fn tiling(n: usize) -> Layout {
    let panels = (0..n)
        .map(|k| Panel::new(format!("p{k}"), Rect::new(0.0, k as f64 / n as f64, 1.0, 1.0 / n as f64).unwrap()))
        .collect();
    Layout::new(0, panels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn areas_match_cell_counts(rects in prop::collection::vec(grid_rect(), 1..=8)) {
        prop_assert!((union_area(&rects) - cells(&rects, 1)).abs() < 1e-12);
        for k in 2..=3 {
            prop_assert!((multi_cover_area(&rects, k) - cells(&rects, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn area_bounds(rects in prop::collection::vec(free_rect(), 1..=8)) {
        let u = union_area(&rects);
        let sum: f64 = rects.iter().map(Rect::area).sum();
        let max = rects.iter().map(Rect::area).fold(0.0, f64::max);
        prop_assert!(u <= sum + 1e-12 && u + 1e-12 >= max && u <= 1.0 + 1e-12);
        if rects.len() >= 2 {
            let two = multi_cover_area(&rects, 2);
            prop_assert!(two <= u + 1e-12);
            // Inclusion-exclusion lower bound on the doubly covered part.
            prop_assert!(two + 1e-9 >= (sum - u) / (rects.len() - 1) as f64);
        }
    }

    #[test]
    fn greedy_matches_exhaustive_scan(
        t in prop::collection::vec(grid_rect(), 0..=5),
        g in prop::collection::vec(grid_rect(), 0..=5),
    ) {
        let m = greedy_match(&t, &g);
        let pairs: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.target, p.generated)).collect();
        prop_assert_eq!(pairs, exhaustive(&t, &g));
        prop_assert_eq!(m.unmatched_targets.len() + m.pairs.len(), t.len());
        prop_assert_eq!(m.unmatched_generated.len() + m.pairs.len(), g.len());
        let s = m.page_score();
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn identical_layouts_score_perfectly(layout in prop::collection::vec(free_rect(), 1..=8), n in 1usize..=8) {
        let projected = project(
            &Layout::new(0, layout.into_iter().enumerate().map(|(i, r)| Panel::new(format!("p{i}"), r)).collect()),
            &LayoutConstraints::new(n),
        ).unwrap();
        let pages = vec![projected.clone(), tiling(3)];
        let s = layout_metrics(&pages, &pages).unwrap();
        prop_assert_eq!(s.count_accuracy, 1.0);
        prop_assert!((s.layout_iou - 1.0).abs() < 1e-12);
        prop_assert_eq!(s.overlap, 0.0);
    }

    #[test]
    fn reading_order_is_a_permutation(rects in prop::collection::vec(free_rect(), 0..=10)) {
        let mut order = reading_order(&rects);
        order.sort_unstable();
        prop_assert_eq!(order, (0..rects.len()).collect::<Vec<_>>());
    }

    #[test]
    fn occm_decreases_with_error(expected in 0u32..30, a in 0u32..40, b in 0u32..40) {
        let (near, far) = if expected.abs_diff(a) <= expected.abs_diff(b) { (a, b) } else { (b, a) };
        let (sn, sf) = (occm(near, expected, OCCM_EPSILON), occm(far, expected, OCCM_EPSILON));
        prop_assert!(sn >= sf);
        prop_assert!(sf >= 0.0 && sn <= 100.0);
        prop_assert_eq!(occm(expected, expected, OCCM_EPSILON), 100.0);
    }

    #[test]
    fn bubbles_are_candidates_on_the_page(
        panel in free_rect().prop_filter("room for text", |r| r.w >= 0.15 && r.h >= 0.1),
        faces in prop::collection::vec((0.0f64..0.8, 0.0f64..0.8, 0.1f64..0.3, 0.1f64..0.3), 0..=3),
        lines in prop::collection::vec((0usize..4, 1usize..12), 1..=4),
    ) {
        let config = ProjectConfig::new(1, PanelCounts::Uniform(1));
        let anchors: Vec<AnchorBox> = faces
            .iter()
            .map(|&(fx, fy, fw, fh)| AnchorBox {
                panel_id: "p".into(),
                kind: AnchorKind::Face,
                region: Rect { x: panel.x + fx * panel.w, y: panel.y + fy * panel.h, w: fw * panel.w, h: fh * panel.h },
                label: None,
            })
            .collect();
        let kinds = [BubbleKind::Speech, BubbleKind::Shout, BubbleKind::Thought, BubbleKind::Narration];
        let dialogue: Vec<DialogueLine> = lines
            .iter()
            .map(|&(k, words)| DialogueLine { speaker: None, text: vec!["word"; words].join(" "), kind: kinds[k] })
            .collect();
        let placed = place_bubbles("p", &panel, &dialogue, &anchors, &config);
        prop_assert_eq!(placed.len(), dialogue.len());
        for (i, e) in placed.iter().enumerate() {
            prop_assert_eq!(e.order_index, i);
            prop_assert!(e.font_px >= config.min_font_px);
            let b = &e.bubble;
            prop_assert!(b.x >= -1e-9 && b.y >= -1e-9 && b.right() <= 1.0 + 1e-9 && b.bottom() <= 1.0 + 1e-9, "{b:?}");
            prop_assert!(candidates(&panel, b.w, b.h).contains(b), "{b:?} is not a candidate");
            let clear = candidates(&panel, b.w, b.h).iter().any(|c| anchors.iter().all(|a| c.intersection_area(&a.region) == 0.0));
            if clear {
                prop_assert!(anchors.iter().all(|a| b.intersection_area(&a.region) == 0.0));
            }
        }
    }
}
