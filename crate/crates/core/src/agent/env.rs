//! Two bundled environments: a side-scrolling grid game and a scripted
//! sequence of app screens.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActionSpec, AgentAction, Environment, EnvironmentSpec, StepOutcome};
use crate::media::Frame;

/// Side length of one grid cell in rendered frames.
pub const GRID_CELL_PX: u32 = 16;
const GRID_ROWS: u32 = 3;
const GRID_FRAME_PERIOD_S: f64 = 0.25;

/// A one-lane side scroller. The player starts at column 0 and wins on the
/// last column. Obstacles block walking but can be jumped; two obstacles
/// are never adjacent, so every level is solvable.
#[derive(Debug, Clone)]
pub struct GridGame {
    width: usize,
    obstacles: Vec<bool>,
    x: usize,
    frames_seen: u64,
    seed: u64,
    obstacle_rate: f64,
}

impl GridGame {
    pub fn new(seed: u64, width: usize, obstacle_rate: f64) -> Self {
        let width = width.max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obstacles = vec![false; width];
        for i in 2..width - 1 {
            let roll: f64 = rng.random();
            if roll < obstacle_rate && !obstacles[i - 1] {
                obstacles[i] = true;
            }
        }
        Self { width, obstacles, x: 0, frames_seen: 0, seed, obstacle_rate }
    }

    pub fn position(&self) -> usize {
        self.x
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn obstacles(&self) -> &[bool] {
        &self.obstacles
    }

    fn goal(&self) -> usize {
        self.width - 1
    }

    fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.width as u32 * GRID_CELL_PX, GRID_ROWS * GRID_CELL_PX, Rgb([135, 190, 235]));
        let mut fill = |col: usize, row: u32, color: Rgb<u8>| {
            for y in row * GRID_CELL_PX..(row + 1) * GRID_CELL_PX {
                for x in col as u32 * GRID_CELL_PX..(col as u32 + 1) * GRID_CELL_PX {
                    img.put_pixel(x, y, color);
                }
            }
        };
        for col in 0..self.width {
            fill(col, 2, Rgb([90, 60, 30]));
            if self.obstacles[col] {
                fill(col, 1, Rgb([110, 110, 110]));
            }
        }
        fill(self.goal(), 1, Rgb([240, 210, 40]));
        fill(self.x, 1, Rgb([210, 30, 30]));
        img
    }
}

/// Rebuilds a bundled environment from the name it reports, so logged
/// episodes can be replayed.
pub fn environment_from_name(name: &str) -> Option<Box<dyn Environment>> {
    if name == "gui-script" {
        return Some(Box::new(GuiScript::shopping()));
    }
    let args = name.strip_prefix("grid(")?.strip_suffix(')')?;
    let mut seed = None;
    let mut width = None;
    let mut rate = None;
    for part in args.split(',') {
        let (k, v) = part.trim().split_once('=')?;
        match k {
            "seed" => seed = v.parse().ok(),
            "width" => width = v.parse().ok(),
            "obstacles" => rate = v.parse().ok(),
            _ => return None,
        }
    }
    Some(Box::new(GridGame::new(seed?, width?, rate?)))
}

impl Environment for GridGame {
    fn name(&self) -> String {
        format!("grid(seed={}, width={}, obstacles={})", self.seed, self.width, self.obstacle_rate)
    }

    fn spec(&self) -> EnvironmentSpec {
        EnvironmentSpec::new(vec![
            ActionSpec::new("move_right", &[], "walk one cell right"),
            ActionSpec::new("jump", &[], "leap two cells right, clearing one obstacle"),
            ActionSpec::new("move_left", &[], "walk one cell left"),
            ActionSpec::new("wait", &[], "do nothing"),
        ])
    }

    fn goal(&self) -> String {
        "Reach the yellow flag at the right edge. Gray blocks must be jumped.".into()
    }

    fn observe(&mut self) -> Result<Frame, String> {
        let t = self.frames_seen as f64 * GRID_FRAME_PERIOD_S;
        self.frames_seen += 1;
        Ok(Frame::new(t, self.render()))
    }

    fn apply(&mut self, action: &AgentAction) -> Result<StepOutcome, String> {
        let goal = self.goal();
        let message = match action.name.as_str() {
            "move_right" if self.x == goal => "already at the flag".to_string(),
            "move_right" if self.obstacles[self.x + 1] => format!("blocked at column {}", self.x),
            "move_right" => {
                self.x += 1;
                format!("moved to column {}", self.x)
            }
            "jump" => {
                let target = (self.x + 2).min(goal);
                if self.obstacles[target] {
                    format!("jump blocked at column {}", self.x)
                } else {
                    self.x = target;
                    format!("jumped to column {}", self.x)
                }
            }
            "move_left" => {
                self.x = self.x.saturating_sub(1);
                format!("moved to column {}", self.x)
            }
            "wait" => format!("waited at column {}", self.x),
            other => return Err(format!("unknown action {other}")),
        };
        Ok(StepOutcome { message, terminal: self.x == goal })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuiScreen {
    pub name: String,
    pub color: [u8; 3],
}

/// Moves `from` to `to` when the action matches, and the argument too if
/// one is given (case-insensitive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuiTransition {
    pub from: usize,
    pub action: String,
    pub arg: Option<(String, String)>,
    pub to: usize,
}

/// A scripted app walkthrough: screens are fixed images and only the
/// scripted actions change the screen. The last screen is terminal.
#[derive(Debug, Clone)]
pub struct GuiScript {
    screens: Vec<GuiScreen>,
    transitions: Vec<GuiTransition>,
    current: usize,
    frames_seen: u64,
    goal: String,
}

impl GuiScript {
    pub fn new(goal: &str, screens: Vec<GuiScreen>, transitions: Vec<GuiTransition>) -> Self {
        Self { screens, transitions, current: 0, frames_seen: 0, goal: goal.into() }
    }

    /// Buying an item in a shopping app.
    pub fn shopping() -> Self {
        let screen = |name: &str, color: [u8; 3]| GuiScreen { name: name.into(), color };
        let t = |from, action: &str, arg: Option<(&str, &str)>, to| GuiTransition {
            from,
            action: action.into(),
            arg: arg.map(|(k, v)| (k.into(), v.into())),
            to,
        };
        Self::new(
            "Buy a pair of running shoes in the shopping app.",
            vec![
                screen("home", [250, 250, 250]),
                screen("search", [230, 240, 255]),
                screen("results", [220, 255, 220]),
                screen("product", [255, 240, 210]),
                screen("cart", [255, 220, 230]),
                screen("order placed", [200, 230, 200]),
            ],
            vec![
                t(0, "tap", Some(("target", "search")), 1),
                t(1, "type", None, 2),
                t(2, "tap", Some(("target", "first result")), 3),
                t(3, "tap", Some(("target", "add to cart")), 4),
                t(4, "tap", Some(("target", "checkout")), 5),
                t(1, "back", None, 0),
                t(2, "back", None, 1),
                t(3, "back", None, 2),
                t(4, "back", None, 3),
            ],
        )
    }

    pub fn screen(&self) -> &GuiScreen {
        &self.screens[self.current]
    }

    fn render(&self) -> RgbImage {
        let (w, h) = (180u32, 320u32);
        let s = self.screen();
        let mut img = RgbImage::from_pixel(w, h, Rgb(s.color));
        // a dark marker band whose height encodes the screen index
        let band_top = 20 + self.current as u32 * 40;
        for y in band_top..(band_top + 24).min(h) {
            for x in 10..w - 10 {
                img.put_pixel(x, y, Rgb([40, 40, 60]));
            }
        }
        img
    }
}

impl Environment for GuiScript {
    fn name(&self) -> String {
        "gui-script".into()
    }

    fn spec(&self) -> EnvironmentSpec {
        EnvironmentSpec::new(vec![
            ActionSpec::new("tap", &["target"], "tap a labelled element"),
            ActionSpec::new("type", &["text"], "type into the focused field"),
            ActionSpec::new("scroll", &["direction"], "scroll up or down"),
            ActionSpec::new("back", &[], "go to the previous screen"),
        ])
    }

    fn goal(&self) -> String {
        self.goal.clone()
    }

    fn observe(&mut self) -> Result<Frame, String> {
        let t = self.frames_seen as f64;
        self.frames_seen += 1;
        Ok(Frame::new(t, self.render()))
    }

    fn apply(&mut self, action: &AgentAction) -> Result<StepOutcome, String> {
        let hit = self.transitions.iter().find(|t| {
            t.from == self.current
                && t.action == action.name
                && t.arg.as_ref().is_none_or(|(k, v)| action.arguments.get(k).is_some_and(|a| a.eq_ignore_ascii_case(v)))
        });
        let message = match hit {
            Some(t) => {
                self.current = t.to;
                format!("now on {}", self.screens[t.to].name)
            }
            None => format!("{} had no effect on {}", action.call_text(), self.screen().name),
        };
        Ok(StepOutcome { message, terminal: self.current + 1 == self.screens.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_rebuild_the_environment() {
        let g = GridGame::new(11, 16, 0.35);
        let rebuilt = environment_from_name(&g.name()).unwrap();
        assert_eq!(rebuilt.name(), g.name());
        assert_eq!(environment_from_name("gui-script").unwrap().name(), "gui-script");
        assert!(environment_from_name("grid(seed=1)").is_none());
        assert!(environment_from_name("pong").is_none());
    }

    #[test]
    fn obstacles_never_adjacent_and_seeded() {
        let a = GridGame::new(7, 40, 0.6);
        let b = GridGame::new(7, 40, 0.6);
        assert_eq!(a.obstacles(), b.obstacles());
        assert!(a.obstacles().windows(2).all(|w| !(w[0] && w[1])));
        assert!(!a.obstacles()[0] && !a.obstacles()[1] && !a.obstacles()[39]);
    }

    #[test]
    fn gui_walkthrough() {
        let mut g = GuiScript::shopping();
        let act = |name: &str, k: &str, v: &str| {
            let mut a = AgentAction::operator(name);
            if !k.is_empty() {
                a.arguments.insert(k.into(), v.into());
            }
            a
        };
        assert!(!g.apply(&act("tap", "target", "Search")).unwrap().terminal);
        g.apply(&act("type", "text", "running shoes")).unwrap();
        g.apply(&act("tap", "target", "first result")).unwrap();
        g.apply(&act("tap", "target", "add to cart")).unwrap();
        let last = g.apply(&act("tap", "target", "checkout")).unwrap();
        assert!(last.terminal);
        assert_eq!(g.screen().name, "order placed");
    }
}
