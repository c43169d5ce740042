mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{config, live, plan};
use mangaflow::gateway::ModelGateway;
use mangaflow::geometry::Rect;
use mangaflow::layout::{Layout, LayoutSource, Panel};
use mangaflow::pipeline::{ErrorKind, EventStatus, Project, StoryInput, UserInputs};
use mangaflow::render::{GatewayBackend, StubBackend};

#[test]
fn full_run_then_unchanged_rerun_makes_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("demo");
    let p = Project::init(&root, &config(), &StoryInput::Plan(plan()), &UserInputs::default()).unwrap();
    let gw = live(Arc::default());
    let comic = p.generate(&gw, &StubBackend).unwrap();
    assert!(gw.calls() > 0);
    assert_eq!(comic.pages.len(), 2);
    assert!(comic.archive_path.exists());
    let cbz = std::fs::read(&comic.archive_path).unwrap();
    let first_page = std::fs::read(p.paths.page(0)).unwrap();
    assert!(p.paths.task().exists());

    let p = Project::open(&root).unwrap();
    let off = ModelGateway::off();
    let again = p.generate(&off, &StubBackend).unwrap();
    assert_eq!(off.calls(), 0);
    assert_eq!(std::fs::read(&again.archive_path).unwrap(), cbz);
    assert_eq!(std::fs::read(p.paths.page(0)).unwrap(), first_page);
    let skipped = p.events.since(0).iter().filter(|e| e.status == EventStatus::Skipped).count();
    assert!(skipped >= 2 + 5 + 2 + 2);
}

#[test]
fn lettering_lands_inside_its_panel() {
    let dir = tempfile::tempdir().unwrap();
    let p = Project::init(dir.path(), &config(), &StoryInput::Plan(plan()), &UserInputs::default()).unwrap();
    p.generate(&live(Arc::default()), &StubBackend).unwrap();
    let state = p.state();
    let page = &state.pages[0];
    assert!(page.flags.letter && page.flags.compose && page.flags.render && page.flags.layout);
    let art = page.artifact.as_ref().unwrap();
    assert_eq!(art.elements.len(), 2);
    for e in &art.elements {
        let panel = art.placements.iter().find(|x| x.panel_id == e.panel_id).unwrap();
        let r = panel.rect.normalized(art.page_px);
        assert!(e.bubble.x >= r.x - 1e-9 && e.bubble.right() <= r.right() + 1e-9, "{e:?}");
    }
}

#[test]
fn user_layout_skips_the_agent_and_takes_plan_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut user = UserInputs::default();
    let left = Panel::new("left", Rect::new(0.0, 0.0, 0.5, 1.0).unwrap());
    let right = Panel::new("right", Rect::new(0.5, 0.0, 0.5, 1.0).unwrap());
    user.layouts.insert(1, Layout::new(1, vec![left, right]));
    let p = Project::init(dir.path(), &config(), &StoryInput::Plan(plan()), &user).unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    p.generate(&live(calls.clone()), &StubBackend).unwrap();
    // Only page 0 asked the agent.
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    let g = p.layout(1).unwrap();
    assert_eq!(g.source, LayoutSource::User);
    // Right-to-left reading: the right panel comes first.
    assert_eq!(g.layout.panel("p1_0").unwrap().region.x, 0.5);
    assert_eq!(g.layout.panel("p1_1").unwrap().region.x, 0.0);
}

#[test]
fn edits_bump_versions_and_reset_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let p = Project::init(dir.path(), &config(), &StoryInput::Plan(plan()), &UserInputs::default()).unwrap();
    let gw = live(Arc::default());
    p.generate(&gw, &StubBackend).unwrap();
    let before = std::fs::read(p.paths.page(0)).unwrap();

    let three = Layout::new(
        0,
        vec![
            Panel::new("a", Rect::new(0.0, 0.0, 1.0, 0.4).unwrap()),
            Panel::new("b", Rect::new(0.0, 0.4, 0.5, 0.6).unwrap()),
            Panel::new("c", Rect::new(0.5, 0.4, 0.5, 0.6).unwrap()),
        ],
    );
    let (projected, v1) = p.put_layout(0, &three).unwrap();
    assert!(v1 >= 1);
    assert_eq!(projected.len(), 3);
    assert!(!p.state().pages[0].flags.compose);
    let (page, v2) = p.recompose(0, &gw, &StubBackend).unwrap();
    assert!(v2 > v1);
    assert_ne!(std::fs::read(&page.image_path).unwrap(), before);
    assert_eq!(p.state().pages[0].version, 2);

    let whole = Rect::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let wrong = Layout::new(0, vec![Panel::new("a", whole), Panel::new("a", whole)]);
    let err = p.put_layout(0, &wrong).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Validation);
    assert!(p.put_layout(7, &three).is_err());
}

#[test]
fn letter_edits_are_validated_and_rerastered() {
    let dir = tempfile::tempdir().unwrap();
    let p = Project::init(dir.path(), &config(), &StoryInput::Plan(plan()), &UserInputs::default()).unwrap();
    let gw = live(Arc::default());
    p.generate(&gw, &StubBackend).unwrap();
    let mut elements = p.letters(0).unwrap();
    let before = std::fs::read(p.paths.page(0)).unwrap();

    let mut bad = elements.clone();
    bad[0].bubble = Rect::new(0.9, 0.9, 0.3, 0.3).unwrap();
    let err = p.put_letters(0, &bad, &gw).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Validation);

    elements[0].text = "Late. Again.".into();
    let (page, _) = p.put_letters(0, &elements, &gw).unwrap();
    assert_eq!(page.elements[0].text, "Late. Again.");
    assert_ne!(std::fs::read(p.paths.page(0)).unwrap(), before);
    // The edit survives an unchanged regeneration.
    let off = ModelGateway::off();
    p.generate(&off, &StubBackend).unwrap();
    assert_eq!(off.calls(), 0);
    assert_eq!(p.letters(0).unwrap()[0].text, "Late. Again.");
}

#[test]
fn rerender_changes_only_that_panel() {
    let dir = tempfile::tempdir().unwrap();
    let p = Project::init(dir.path(), &config(), &StoryInput::Plan(plan()), &UserInputs::default()).unwrap();
    let gw = live(Arc::default());
    p.generate(&gw, &StubBackend).unwrap();
    let old = p.state().pages[0].assets.clone();
    let (asset, _) = p.rerender(0, "p0_1", &gw, &StubBackend).unwrap();
    let new = p.state().pages[0].assets.clone();
    for (a, b) in old.iter().zip(&new) {
        assert_eq!(a.image_sha256 == b.image_sha256, a.panel_id != "p0_1", "{}", a.panel_id);
    }
    assert_eq!(asset.image_sha256, new[1].image_sha256);
    assert!(p.rerender(0, "nope", &gw, &StubBackend).is_err());
}

#[test]
fn failed_renders_fall_back_to_stubs_and_flag_the_page() {
    let dir = tempfile::tempdir().unwrap();
    let p = Project::init(dir.path(), &config(), &StoryInput::Plan(plan()), &UserInputs::default()).unwrap();
    let gw = live(Arc::default());
    p.generate(&gw, &StubBackend).unwrap();
    let off = ModelGateway::off();
    p.rerender(0, "p0_0", &gw, &GatewayBackend { gateway: &off }).unwrap();
    let assets: serde_json::Value = mangaflow::fsutil::read_json(&p.paths.assets(0)).unwrap();
    assert!(assets["flags"][0].as_str().unwrap().starts_with("stub_substituted:p0_0"));
    let (page, _) = p.recompose(0, &gw, &GatewayBackend { gateway: &off }).unwrap();
    assert!(page.flags.iter().any(|f| f.starts_with("stub_substituted:p0_0")));

    // A working backend is tried again on the next pass and clears the flag.
    let (page, _) = p.recompose(0, &gw, &StubBackend).unwrap();
    assert!(page.flags.is_empty(), "{:?}", page.flags);
}

#[test]
fn empty_prompt_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Project::init(dir.path(), &config(), &StoryInput::Prompt("  ".into()), &UserInputs::default())
        .err()
        .unwrap();
    assert_eq!(err.kind, ErrorKind::Validation);
}

#[test]
fn long_poll_wakes_on_new_events() {
    let dir = tempfile::tempdir().unwrap();
    let p = Arc::new(Project::init(dir.path(), &config(), &StoryInput::Plan(plan()), &UserInputs::default()).unwrap());
    let seq = p.events.last_seq();
    let q = p.clone();
    let h = std::thread::spawn(move || q.events.wait_since(seq, std::time::Duration::from_secs(10)));
    std::thread::sleep(std::time::Duration::from_millis(50));
    p.events.emit("test", None, None, EventStatus::Done, "hello");
    let got = h.join().unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].seq, seq + 1);
    assert!(p.events.wait_since(seq + 1, std::time::Duration::from_millis(20)).is_empty());
    let reopened = Project::open(dir.path()).unwrap();
    assert_eq!(reopened.events.last_seq(), seq + 1);
}
