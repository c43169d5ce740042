use std::collections::HashSet;

use super::{PageSpec, PanelSpec, ProjectConfig, StoryPlan};

/// Forces `plan` to the configured page count and per-page panel counts.
///
/// Pages past the configured count are folded into the last kept page. Missing
/// pages come from splitting the page with the most panels at its midpoint.
/// On each page, surplus panels are merged tail-first (the last panel into the
/// one before it) and missing panels come from splitting the panel with the
/// longest description. Dialogue lines are never dropped. A plan that already
/// conforms is returned unchanged.
pub fn enforce_structure(mut plan: StoryPlan, config: &ProjectConfig) -> StoryPlan {
    let target = config.page_count.max(1);

    while plan.pages.len() > target {
        let extra = plan.pages.pop().expect("more pages than target");
        let last = plan.pages.last_mut().expect("target >= 1");
        if !extra.context.trim().is_empty() {
            last.context = join(&last.context, &extra.context);
        }
        last.panels.extend(extra.panels);
    }
    if plan.pages.is_empty() {
        plan.pages.push(PageSpec {
            index: 0,
            context: String::new(),
            panels: vec![],
        });
    }
    while plan.pages.len() < target {
        let k = longest_page(&plan.pages);
        if plan.pages[k].panels.len() < 2 {
            split_panel(&mut plan.pages[k].panels);
        }
        let page = &mut plan.pages[k];
        let tail = page.panels.split_off(page.panels.len().div_ceil(2));
        let new_page = PageSpec {
            index: 0,
            context: page.context.clone(),
            panels: tail,
        };
        plan.pages.insert(k + 1, new_page);
    }

    let first_section = plan.sections.first().map(|s| s.section_id.clone()).unwrap_or_default();
    for (i, page) in plan.pages.iter_mut().enumerate() {
        page.index = i;
        let want = config.panel_count(i).max(1);
        if page.panels.is_empty() {
            page.panels.push(PanelSpec {
                panel_id: String::new(),
                description: if page.context.trim().is_empty() {
                    "An establishing shot.".into()
                } else {
                    page.context.clone()
                },
                section_id: first_section.clone(),
                dialogue: vec![],
                shot_hint: None,
            });
        }
        while page.panels.len() > want {
            let last = page.panels.pop().expect("more panels than wanted");
            let prev = page.panels.last_mut().expect("want >= 1");
            prev.description = join(&prev.description, &last.description);
            prev.dialogue.extend(last.dialogue);
        }
        while page.panels.len() < want {
            split_panel(&mut page.panels);
        }
    }

    fix_ids(&mut plan);
    plan
}

fn join(a: &str, b: &str) -> String {
    match (a.trim().is_empty(), b.trim().is_empty()) {
        (true, _) => b.to_string(),
        (_, true) => a.to_string(),
        _ => format!("{} {}", a.trim_end(), b.trim_start()),
    }
}

/// Index of the page with the most panels; the first one on ties.
fn longest_page(pages: &[PageSpec]) -> usize {
    let mut best = 0;
    for (i, p) in pages.iter().enumerate() {
        if p.panels.len() > pages[best].panels.len() {
            best = i;
        }
    }
    best
}

/// Splits the panel with the longest description (first on ties) into two
/// consecutive panels, dividing description and dialogue.
fn split_panel(panels: &mut Vec<PanelSpec>) {
    let mut k = 0;
    for (i, p) in panels.iter().enumerate() {
        if p.description.chars().count() > panels[k].description.chars().count() {
            k = i;
        }
    }
    let p = &mut panels[k];
    let (a, b) = split_text(&p.description);
    let tail_lines = p.dialogue.split_off(p.dialogue.len().div_ceil(2));
    p.description = a;
    let second = PanelSpec {
        panel_id: String::new(),
        description: b,
        section_id: p.section_id.clone(),
        dialogue: tail_lines,
        shot_hint: p.shot_hint.clone(),
    };
    panels.insert(k + 1, second);
}

/// Splits at the sentence end nearest the middle, else at the space nearest
/// the middle. Text without either is duplicated.
fn split_text(text: &str) -> (String, String) {
    let t = text.trim();
    let mid = t.len() / 2;
    let nearest = |cuts: Vec<usize>| cuts.into_iter().min_by_key(|&c| c.abs_diff(mid));
    let sentence_ends: Vec<usize> = t
        .match_indices(['.', '!', '?'])
        .map(|(i, _)| i + 1)
        .filter(|&i| i < t.len() && t[i..].starts_with(char::is_whitespace))
        .collect();
    let spaces: Vec<usize> = t.match_indices(char::is_whitespace).map(|(i, _)| i).collect();
    match nearest(sentence_ends).or_else(|| nearest(spaces)) {
        Some(cut) => (t[..cut].trim().to_string(), t[cut..].trim().to_string()),
        None => (t.to_string(), t.to_string()),
    }
}

/// Keeps unique non-empty panel ids and assigns `p{page}_{j}` (suffixed when
/// taken) to the rest.
fn fix_ids(plan: &mut StoryPlan) {
    let mut taken: HashSet<String> = HashSet::new();
    let mut needs_id = vec![];
    for (i, page) in plan.pages.iter().enumerate() {
        for (j, p) in page.panels.iter().enumerate() {
            if p.panel_id.is_empty() || !taken.insert(p.panel_id.clone()) {
                needs_id.push((i, j));
            }
        }
    }
    for (i, j) in needs_id {
        let base = format!("p{i}_{j}");
        let mut id = base.clone();
        let mut k = 1;
        while taken.contains(&id) {
            id = format!("{base}_{k}");
            k += 1;
        }
        taken.insert(id.clone());
        plan.pages[i].panels[j].panel_id = id;
    }
}
