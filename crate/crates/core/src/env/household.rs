//! Household chores in a single room of receptacles and objects.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{read_data, EnvFactory, EnvKind, EnvObservation, Environment, EpisodeState};
use crate::error::{Error, Result};
use crate::model::Task;

pub const TASK_TYPES: [&str; 6] = ["put", "clean", "heat", "cool", "look", "puttwo"];

const INVENTORY: &str = "inventory";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receptacle {
    pub name: String,
    #[serde(default)]
    pub openable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub name: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub id: String,
    pub receptacles: Vec<Receptacle>,
    pub objects: Vec<Placement>,
}

impl World {
    fn validate(&self) -> Result<()> {
        let names: BTreeSet<&str> = self.receptacles.iter().map(|r| r.name.as_str()).collect();
        if names.len() != self.receptacles.len() {
            return Err(Error::InvalidData(format!(
                "world `{}` repeats a receptacle",
                self.id
            )));
        }
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if !names.contains(o.location.as_str()) {
                return Err(Error::InvalidData(format!(
                    "object `{}` in world `{}` sits on unknown receptacle `{}`",
                    o.name, self.id, o.location
                )));
            }
            if !seen.insert(o.name.as_str()) || names.contains(o.name.as_str()) {
                return Err(Error::InvalidData(format!(
                    "world `{}` repeats name `{}`",
                    self.id, o.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdGoal {
    /// Object type, e.g. `pan`.
    pub object: String,
    /// Receptacle type, e.g. `countertop`; the lamp type for `look` tasks.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdTask {
    pub id: String,
    pub world: String,
    pub task_type: String,
    pub description: String,
    pub goal: HouseholdGoal,
}

/// `pan 1` -> `pan`.
fn kind_of(name: &str) -> &str {
    name.rsplit_once(' ')
        .filter(|(_, n)| n.chars().all(|c| c.is_ascii_digit()))
        .map_or(name, |(k, _)| k)
}

#[derive(Debug, Clone, Default)]
struct ObjectState {
    location: String,
    clean: bool,
    hot: bool,
    cold: bool,
    on: bool,
}

#[derive(Debug, Clone)]
enum Command {
    GoTo(String),
    Take(String, String),
    Put(String, String),
    Open(String),
    Close(String),
    Clean(String, String),
    Heat(String, String),
    Cool(String, String),
    Use(String),
    Examine(String),
    Look,
    Inventory,
}

type Parse = fn(&regex::Captures) -> Command;

static COMMANDS: LazyLock<Vec<(Regex, Parse)>> = LazyLock::new(|| {
    let table: Vec<(&str, Parse)> = vec![
        (r"^go to (.+)$", |c| Command::GoTo(c[1].trim().to_string())),
        (r"^take (.+) from (.+)$", |c| {
            Command::Take(c[1].trim().to_string(), c[2].trim().to_string())
        }),
        (r"^put (.+) (?:in/on|in|on) (.+)$", |c| {
            Command::Put(c[1].trim().to_string(), c[2].trim().to_string())
        }),
        (r"^open (.+)$", |c| Command::Open(c[1].trim().to_string())),
        (r"^close (.+)$", |c| Command::Close(c[1].trim().to_string())),
        (r"^clean (.+) with (.+)$", |c| {
            Command::Clean(c[1].trim().to_string(), c[2].trim().to_string())
        }),
        (r"^heat (.+) with (.+)$", |c| {
            Command::Heat(c[1].trim().to_string(), c[2].trim().to_string())
        }),
        (r"^cool (.+) with (.+)$", |c| {
            Command::Cool(c[1].trim().to_string(), c[2].trim().to_string())
        }),
        (r"^use (.+)$", |c| Command::Use(c[1].trim().to_string())),
        (r"^examine (.+)$", |c| {
            Command::Examine(c[1].trim().to_string())
        }),
        (r"^look$", |_| Command::Look),
        (r"^inventory$", |_| Command::Inventory),
    ];
    table
        .into_iter()
        .map(|(p, f)| (Regex::new(p).expect("static pattern"), f))
        .collect()
});

fn parse_command(action: &str) -> Option<Command> {
    let action = action.trim().to_lowercase();
    COMMANDS
        .iter()
        .find_map(|(re, build)| re.captures(&action).map(|c| build(&c)))
}

pub struct HouseholdEnv {
    worlds: Arc<HashMap<String, World>>,
    tasks: Arc<HashMap<String, HouseholdTask>>,
    task: Option<HouseholdTask>,
    receptacles: Vec<Receptacle>,
    open: BTreeSet<String>,
    objects: Vec<(String, ObjectState)>,
    at: Option<String>,
    state: EpisodeState,
}

impl HouseholdEnv {
    fn receptacle(&self, name: &str) -> Option<&Receptacle> {
        self.receptacles.iter().find(|r| r.name == name)
    }

    fn object_mut(&mut self, name: &str) -> Option<&mut ObjectState> {
        self.objects
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
    }

    fn object(&self, name: &str) -> Option<&ObjectState> {
        self.objects.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    fn holding(&self) -> Option<&str> {
        self.objects
            .iter()
            .find(|(_, s)| s.location == INVENTORY)
            .map(|(n, _)| n.as_str())
    }

    fn is_accessible(&self, receptacle: &Receptacle) -> bool {
        !receptacle.openable || self.open.contains(&receptacle.name)
    }

    fn contents(&self, receptacle: &str) -> String {
        let items: Vec<String> = self
            .objects
            .iter()
            .filter(|(_, s)| s.location == receptacle)
            .map(|(n, _)| format!("a {n}"))
            .collect();
        if items.is_empty() {
            "nothing".into()
        } else {
            items.join(", ")
        }
    }

    fn describe(&self, receptacle: &Receptacle) -> String {
        let name = &receptacle.name;
        if !receptacle.openable {
            format!("On the {name}, you see {}.", self.contents(name))
        } else if self.open.contains(name) {
            format!(
                "The {name} is open. In it, you see {}.",
                self.contents(name)
            )
        } else {
            format!("The {name} is closed.")
        }
    }

    /// Object held and standing at `tool`, whose type must be `tool_kind`.
    fn process(&mut self, object: &str, tool: &str, tool_kind: &str) -> Option<&mut ObjectState> {
        if kind_of(tool) != tool_kind
            || self.at.as_deref() != Some(tool)
            || self.receptacle(tool).is_none()
        {
            return None;
        }
        if self.holding() != Some(object) {
            return None;
        }
        self.object_mut(object)
    }

    fn apply(&mut self, command: Command) -> Option<String> {
        match command {
            Command::GoTo(r) => {
                let receptacle = self.receptacle(&r)?.clone();
                self.at = Some(r.clone());
                Some(format!("You arrive at {r}. {}", self.describe(&receptacle)))
            }
            Command::Take(o, r) => {
                let receptacle = self.receptacle(&r)?.clone();
                if self.at.as_deref() != Some(r.as_str())
                    || !self.is_accessible(&receptacle)
                    || self.holding().is_some()
                {
                    return None;
                }
                let state = self.object_mut(&o)?;
                if state.location != r {
                    return None;
                }
                state.location = INVENTORY.into();
                Some(format!("You pick up the {o} from the {r}."))
            }
            Command::Put(o, r) => {
                let receptacle = self.receptacle(&r)?.clone();
                if self.at.as_deref() != Some(r.as_str())
                    || !self.is_accessible(&receptacle)
                    || self.holding() != Some(o.as_str())
                {
                    return None;
                }
                self.object_mut(&o)?.location = r.clone();
                Some(format!("You put the {o} in/on the {r}."))
            }
            Command::Open(r) | Command::Close(r)
                if self.receptacle(&r).is_none_or(|x| !x.openable) =>
            {
                None
            }
            Command::Open(r) => {
                if self.at.as_deref() != Some(r.as_str()) || self.open.contains(&r) {
                    return None;
                }
                self.open.insert(r.clone());
                Some(format!(
                    "You open the {r}. In it, you see {}.",
                    self.contents(&r)
                ))
            }
            Command::Close(r) => {
                if self.at.as_deref() != Some(r.as_str()) || !self.open.remove(&r) {
                    return None;
                }
                Some(format!("You close the {r}."))
            }
            Command::Clean(o, r) => {
                self.process(&o, &r, "sinkbasin")?.clean = true;
                Some(format!("You clean the {o} using the {r}."))
            }
            Command::Heat(o, r) => {
                let state = self.process(&o, &r, "microwave")?;
                state.hot = true;
                state.cold = false;
                Some(format!("You heat the {o} using the {r}."))
            }
            Command::Cool(o, r) => {
                let state = self.process(&o, &r, "fridge")?;
                state.cold = true;
                state.hot = false;
                Some(format!("You cool the {o} using the {r}."))
            }
            Command::Use(lamp) => {
                if kind_of(&lamp) != "desklamp" {
                    return None;
                }
                let at = self.at.clone()?;
                let state = self.object_mut(&lamp)?;
                if state.location != at {
                    return None;
                }
                state.on = true;
                Some(format!("You turn on the {lamp}."))
            }
            Command::Examine(x) => {
                if let Some(receptacle) = self.receptacle(&x).cloned() {
                    if self.at.as_deref() != Some(x.as_str()) {
                        return None;
                    }
                    return Some(self.describe(&receptacle));
                }
                let state = self.object(&x)?;
                if state.location != INVENTORY && Some(&state.location) != self.at.as_ref() {
                    return None;
                }
                let mut adjectives = Vec::new();
                if state.clean {
                    adjectives.push("clean");
                }
                if state.hot {
                    adjectives.push("hot");
                }
                if state.cold {
                    adjectives.push("cool");
                }
                if adjectives.is_empty() {
                    Some(format!("There's nothing special about {x}."))
                } else {
                    Some(format!("The {x} is {}.", adjectives.join(" and ")))
                }
            }
            Command::Look => Some(match &self.at {
                Some(r) => format!("You are facing the {r}. Next to it, you see nothing."),
                None => "You are in the middle of a room.".to_string(),
            }),
            Command::Inventory => Some(match self.holding() {
                Some(o) => format!("You are carrying: a {o}."),
                None => "You are not carrying anything.".to_string(),
            }),
        }
    }

    fn goal_met(&self) -> bool {
        let Some(task) = &self.task else { return false };
        let goal = &task.goal;
        let placed = |pred: fn(&ObjectState) -> bool| {
            self.objects
                .iter()
                .filter(|(n, s)| {
                    kind_of(n) == goal.object
                        && s.location != INVENTORY
                        && kind_of(&s.location) == goal.target
                        && pred(s)
                })
                .count()
        };
        match task.task_type.as_str() {
            "put" => placed(|_| true) >= 1,
            "clean" => placed(|s| s.clean) >= 1,
            "heat" => placed(|s| s.hot) >= 1,
            "cool" => placed(|s| s.cold) >= 1,
            "puttwo" => placed(|_| true) >= 2,
            "look" => {
                let holding = self.holding().is_some_and(|o| kind_of(o) == goal.object);
                let lit = self
                    .objects
                    .iter()
                    .any(|(n, s)| kind_of(n) == goal.target && s.on);
                holding && lit
            }
            _ => false,
        }
    }
}

impl Environment for HouseholdEnv {
    fn reset(&mut self, task_id: &str) -> Result<EnvObservation> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?
            .clone();
        let world = self.worlds.get(&task.world).ok_or_else(|| {
            Error::Env(format!(
                "task `{task_id}` names unknown world `{}`",
                task.world
            ))
        })?;
        self.receptacles = world.receptacles.clone();
        self.objects = world
            .objects
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    ObjectState {
                        location: p.location.clone(),
                        ..ObjectState::default()
                    },
                )
            })
            .collect();
        self.open.clear();
        self.at = None;
        self.state = EpisodeState::Running;
        let listing = self
            .receptacles
            .iter()
            .map(|r| format!("a {}", r.name))
            .collect::<Vec<_>>()
            .join(", ");
        let text = format!(
            "You are in the middle of a room. Looking quickly around you, you see {listing}.\nYour task is to: {}.",
            task.description.trim_end_matches('.')
        );
        self.task = Some(task);
        Ok(EnvObservation::new(text))
    }

    fn step(&mut self, action: &str) -> Result<EnvObservation> {
        self.state.check_step()?;
        let Some(text) = parse_command(action).and_then(|c| self.apply(c)) else {
            return Ok(EnvObservation::invalid());
        };
        if self.goal_met() {
            self.state = EpisodeState::Done;
            return Ok(EnvObservation::finished(text, 1.0));
        }
        Ok(EnvObservation::new(text))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HouseholdFile {
    worlds: Vec<World>,
    tasks: Vec<HouseholdTask>,
}

pub struct HouseholdSuite {
    worlds: Arc<HashMap<String, World>>,
    by_id: Arc<HashMap<String, HouseholdTask>>,
    tasks: Vec<Task>,
}

impl HouseholdSuite {
    pub fn new(worlds: Vec<World>, household_tasks: Vec<HouseholdTask>) -> Result<Self> {
        let mut world_map = HashMap::new();
        for w in worlds {
            w.validate()?;
            world_map.insert(w.id.clone(), w);
        }
        let mut by_id = HashMap::new();
        let mut tasks = Vec::new();
        for t in household_tasks {
            if !TASK_TYPES.contains(&t.task_type.as_str()) {
                return Err(Error::InvalidData(format!(
                    "task `{}` has unknown type `{}`",
                    t.id, t.task_type
                )));
            }
            if !world_map.contains_key(&t.world) {
                return Err(Error::InvalidData(format!(
                    "task `{}` names unknown world `{}`",
                    t.id, t.world
                )));
            }
            tasks.push(Task {
                id: t.id.clone(),
                env_name: EnvKind::Household.as_str().to_string(),
                description: t.description.clone(),
                task_type: Some(t.task_type.clone()),
            });
            by_id.insert(t.id.clone(), t);
        }
        crate::model::validate_tasks(&tasks)?;
        Ok(Self {
            worlds: Arc::new(world_map),
            by_id: Arc::new(by_id),
            tasks,
        })
    }

    fn parse(text: &str) -> Result<Self> {
        let file: HouseholdFile = serde_json::from_str(text)?;
        Self::new(file.worlds, file.tasks)
    }

    pub fn builtin() -> Result<Self> {
        Self::parse(include_str!("../../data/envs/household.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&read_data(dir, "household.json")?)
    }
}

impl EnvFactory for HouseholdSuite {
    fn kind(&self) -> EnvKind {
        EnvKind::Household
    }

    fn with_tasks_json(&self, json: &str) -> Result<Arc<dyn EnvFactory>> {
        let mut worlds: Vec<World> = self.worlds.values().cloned().collect();
        worlds.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Arc::new(Self::new(worlds, serde_json::from_str(json)?)?))
    }

    fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    fn create(&self) -> Box<dyn Environment> {
        Box::new(HouseholdEnv {
            worlds: self.worlds.clone(),
            tasks: self.by_id.clone(),
            task: None,
            receptacles: Vec::new(),
            open: BTreeSet::new(),
            objects: Vec::new(),
            at: None,
            state: EpisodeState::Idle,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> HouseholdSuite {
        HouseholdSuite::builtin().unwrap()
    }

    fn run(task_id: &str, actions: &[&str]) -> Vec<EnvObservation> {
        let suite = suite();
        let mut env = suite.create();
        env.reset(task_id).unwrap();
        actions.iter().map(|a| env.step(a).unwrap()).collect()
    }

    #[test]
    fn kinds() {
        assert_eq!(kind_of("pan 1"), "pan");
        assert_eq!(kind_of("stoveburner 12"), "stoveburner");
        assert_eq!(kind_of("desklamp"), "desklamp");
    }

    #[test]
    fn reset_lists_receptacles() {
        let suite = suite();
        let mut env = suite.create();
        let obs = env.reset("h-put-1").unwrap();
        assert!(obs.text.starts_with(
            "You are in the middle of a room. Looking quickly around you, you see a "
        ));
        assert!(obs.text.contains("countertop 1"));
        assert!(obs.text.contains("Your task is to: "));
    }

    #[test]
    fn taking_from_the_wrong_place_is_invalid() {
        let obs = run(
            "h-put-1",
            &[
                "go to stoveburner 1",
                "take pan from stoveburner 1",
                "take pan 1 from stoveburner 1",
            ],
        );
        assert!(obs[0].valid);
        assert_eq!(obs[1].text, super::super::INVALID_ACTION);
        assert!(!obs[1].valid);
        assert!(
            !obs[2].valid,
            "pan 1 starts on countertop 1: {}",
            obs[2].text
        );
    }

    #[test]
    fn every_task_type_has_a_solution() {
        let solutions: &[(&str, &[&str])] = &[
            (
                "h-put-1",
                &[
                    "go to countertop 1",
                    "take pan 1 from countertop 1",
                    "go to stoveburner 1",
                    "put pan 1 in/on stoveburner 1",
                ],
            ),
            (
                "h-clean-1",
                &[
                    "go to countertop 1",
                    "take apple 1 from countertop 1",
                    "go to sinkbasin 1",
                    "clean apple 1 with sinkbasin 1",
                    "go to fridge 1",
                    "open fridge 1",
                    "put apple 1 in/on fridge 1",
                ],
            ),
            (
                "h-heat-1",
                &[
                    "go to fridge 1",
                    "open fridge 1",
                    "take egg 1 from fridge 1",
                    "go to microwave 1",
                    "heat egg 1 with microwave 1",
                    "go to countertop 1",
                    "put egg 1 in/on countertop 1",
                ],
            ),
            (
                "h-cool-1",
                &[
                    "go to countertop 1",
                    "take tomato 1 from countertop 1",
                    "go to fridge 1",
                    "cool tomato 1 with fridge 1",
                    "go to diningtable 1",
                    "put tomato 1 in/on diningtable 1",
                ],
            ),
            (
                "h-look-1",
                &[
                    "go to shelf 1",
                    "take book 1 from shelf 1",
                    "go to sidetable 1",
                    "use desklamp 1",
                ],
            ),
            (
                "h-puttwo-1",
                &[
                    "go to cabinet 1",
                    "open cabinet 1",
                    "take mug 1 from cabinet 1",
                    "go to diningtable 1",
                    "put mug 1 in/on diningtable 1",
                    "go to cabinet 1",
                    "take mug 2 from cabinet 1",
                    "go to diningtable 1",
                    "put mug 2 in/on diningtable 1",
                ],
            ),
        ];
        let suite = suite();
        let types: BTreeSet<String> = suite
            .tasks()
            .iter()
            .filter_map(|t| t.task_type.clone())
            .collect();
        assert_eq!(types, TASK_TYPES.iter().map(|s| s.to_string()).collect());
        for (task, actions) in solutions {
            let obs = run(task, actions);
            for o in &obs[..obs.len() - 1] {
                assert!(o.valid && !o.done, "{task}: {}", o.text);
            }
            let last = obs.last().unwrap();
            assert!(last.done && last.reward == 1.0, "{task}: {}", last.text);
        }
    }

    #[test]
    fn processing_without_goal_state_is_not_success() {
        // cleaned but placed in the wrong receptacle type
        let obs = run(
            "h-clean-1",
            &[
                "go to countertop 1",
                "take apple 1 from countertop 1",
                "go to sinkbasin 1",
                "clean apple 1 with sinkbasin 1",
                "go to countertop 1",
                "put apple 1 in/on countertop 1",
            ],
        );
        assert!(obs.iter().all(|o| o.valid && !o.done));
    }

    #[test]
    fn closed_receptacles_block_access() {
        let obs = run(
            "h-heat-1",
            &[
                "go to fridge 1",
                "take egg 1 from fridge 1",
                "open fridge 1",
                "open fridge 1",
            ],
        );
        assert_eq!(
            obs[0].text,
            "You arrive at fridge 1. The fridge 1 is closed."
        );
        assert!(!obs[1].valid);
        assert!(obs[2].text.contains("egg 1"));
        assert!(!obs[3].valid);
    }
}
