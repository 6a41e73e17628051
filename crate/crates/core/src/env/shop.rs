//! Shopping environment and its attribute-matching purchase reward.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    parse_bracketed, read_data, EnvFactory, EnvKind, EnvObservation, Environment, EpisodeState,
};
use crate::error::{Error, Result};
use crate::model::Task;

pub const RESULTS_PER_PAGE: usize = 10;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "into", "is", "it",
    "its", "of", "on", "or", "that", "the", "this", "to", "with",
];

/// Extracts the content tokens of a product title used by [`text_match`].
pub trait TitleTagger: Send + Sync {
    fn tokens(&self, title: &str) -> BTreeSet<String>;
}

/// Lowercased alphabetic tokens minus a short stopword list.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTagger;

impl TitleTagger for SimpleTagger {
    fn tokens(&self, title: &str) -> BTreeSet<String> {
        title
            .split(|c: char| !c.is_alphabetic())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .filter(|w| !STOPWORDS.contains(&w.as_str()))
            .collect()
    }
}

/// Fraction of the goal title's content tokens present in the purchased title.
/// A goal title without content tokens scores 0.
pub fn text_match(purchased_title: &str, goal_title: &str) -> f64 {
    text_match_with(&SimpleTagger, purchased_title, goal_title)
}

pub fn text_match_with(tagger: &dyn TitleTagger, purchased_title: &str, goal_title: &str) -> f64 {
    let goal = tagger.tokens(goal_title);
    if goal.is_empty() {
        return 0.0;
    }
    let purchased = tagger.tokens(purchased_title);
    goal.intersection(&purchased).count() as f64 / goal.len() as f64
}

/// Title-type multiplier. Cases are checked in order; the first that holds wins.
pub fn r_type(text_match: f64, query_match: bool, category_match: bool) -> f64 {
    if text_match == 0.0 {
        0.0
    } else if text_match < 0.1 {
        0.1
    } else if text_match <= 0.2 && !query_match && !category_match {
        0.5
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopGoal {
    pub required_attributes: BTreeSet<String>,
    pub required_options: BTreeSet<String>,
    pub price_cap: f64,
    pub goal_title: String,
    #[serde(default)]
    pub query_terms: Vec<String>,
    pub category: String,
}

/// A purchased product: `options` holds the options chosen at purchase time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopItem {
    pub title: String,
    pub attributes: BTreeSet<String>,
    pub options: BTreeSet<String>,
    pub price: f64,
    pub category: String,
}

fn query_matches(tagger: &dyn TitleTagger, item: &ShopItem, goal: &ShopGoal) -> bool {
    if goal.query_terms.is_empty() {
        return false;
    }
    let title = tagger.tokens(&item.title);
    goal.query_terms
        .iter()
        .flat_map(|t| tagger.tokens(t))
        .all(|t| title.contains(&t))
}

pub fn shop_reward(purchased: &ShopItem, goal: &ShopGoal) -> f64 {
    shop_reward_with(&SimpleTagger, purchased, goal)
}

pub fn shop_reward_with(tagger: &dyn TitleTagger, purchased: &ShopItem, goal: &ShopGoal) -> f64 {
    let matched_attributes = goal
        .required_attributes
        .intersection(&purchased.attributes)
        .count();
    let matched_options = goal
        .required_options
        .intersection(&purchased.options)
        .count();
    let price_ok = usize::from(purchased.price <= goal.price_cap);
    let numerator = (matched_attributes + matched_options + price_ok) as f64;
    let denominator = (goal.required_attributes.len() + goal.required_options.len() + 1) as f64;
    let tm = text_match_with(tagger, &purchased.title, &goal.goal_title);
    let category_match = purchased.category.eq_ignore_ascii_case(&goal.category);
    numerator / denominator * r_type(tm, query_matches(tagger, purchased, goal), category_match)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: String,
    pub title: String,
    pub category: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    /// Option group name to the values offered in it.
    #[serde(default)]
    pub options: BTreeMap<String, Vec<String>>,
    pub price: f64,
}

impl CatalogItem {
    fn search_tokens(&self) -> BTreeSet<String> {
        let mut tokens = SimpleTagger.tokens(&self.title);
        tokens.extend(self.attributes.iter().flat_map(|a| SimpleTagger.tokens(a)));
        tokens.extend(SimpleTagger.tokens(&self.category));
        tokens
    }

    fn purchased(&self, chosen: &BTreeMap<String, String>) -> ShopItem {
        ShopItem {
            title: self.title.clone(),
            attributes: self.attributes.iter().cloned().collect(),
            options: chosen.values().cloned().collect(),
            price: self.price,
            category: self.category.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShopTask {
    pub id: String,
    pub instruction: String,
    pub goal: ShopGoal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
}

#[derive(Debug, Clone)]
enum Page {
    Search,
    Results {
        query: String,
        page: usize,
        hits: Vec<usize>,
    },
    Item {
        item: usize,
        chosen: BTreeMap<String, String>,
        query: String,
        page: usize,
        hits: Vec<usize>,
    },
}

pub struct ShopEnv {
    catalog: Arc<Vec<CatalogItem>>,
    tasks: Arc<HashMap<String, ShopTask>>,
    goal: Option<ShopGoal>,
    instruction: String,
    page: Page,
    state: EpisodeState,
}

impl ShopEnv {
    fn search(&self, query: &str) -> Vec<usize> {
        let terms = SimpleTagger.tokens(query);
        let mut scored: Vec<(usize, usize)> = self
            .catalog
            .iter()
            .enumerate()
            .map(|(i, item)| (i, item.search_tokens().intersection(&terms).count()))
            .filter(|&(_, score)| score > 0)
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(i, _)| i).collect()
    }

    fn render_search(&self) -> String {
        format!(
            "WebShop [SEP] Instruction: [SEP] {} [SEP] [Search]",
            self.instruction
        )
    }

    fn render_results(&self, page: usize, hits: &[usize]) -> String {
        let pages = hits.len().div_ceil(RESULTS_PER_PAGE).max(1);
        let mut parts = vec![
            "[Back to Search]".to_string(),
            format!("Page {} (Total results: {})", page + 1, hits.len()),
        ];
        if page > 0 {
            parts.push("[< Prev]".into());
        }
        if page + 1 < pages {
            parts.push("[Next >]".into());
        }
        for &i in hits
            .iter()
            .skip(page * RESULTS_PER_PAGE)
            .take(RESULTS_PER_PAGE)
        {
            let item = &self.catalog[i];
            parts.push(format!("[{}]", item.id));
            parts.push(item.title.clone());
            parts.push(format!("${:.2}", item.price));
        }
        parts.join(" [SEP] ")
    }

    fn render_item(&self, index: usize, chosen: &BTreeMap<String, String>) -> String {
        let item = &self.catalog[index];
        let mut parts = vec!["[Back to Search]".to_string(), "[< Prev]".to_string()];
        for (group, values) in &item.options {
            parts.push(format!("{group}:"));
            for v in values {
                if chosen.get(group) == Some(v) {
                    parts.push(format!("[{v}] (selected)"));
                } else {
                    parts.push(format!("[{v}]"));
                }
            }
        }
        parts.push(item.title.clone());
        parts.push(format!("Price: ${:.2}", item.price));
        if !item.attributes.is_empty() {
            parts.push(format!("Features: {}", item.attributes.join(", ")));
        }
        parts.push("[Buy Now]".into());
        parts.join(" [SEP] ")
    }

    fn click(&mut self, target: &str) -> EnvObservation {
        let target_lc = target.to_lowercase();
        match std::mem::replace(&mut self.page, Page::Search) {
            Page::Search => {
                self.page = Page::Search;
                EnvObservation::invalid()
            }
            Page::Results { query, page, hits } => {
                let pages = hits.len().div_ceil(RESULTS_PER_PAGE).max(1);
                let on_page: Vec<usize> = hits
                    .iter()
                    .copied()
                    .skip(page * RESULTS_PER_PAGE)
                    .take(RESULTS_PER_PAGE)
                    .collect();
                if target_lc == "back to search" {
                    self.page = Page::Search;
                    EnvObservation::new(self.render_search())
                } else if target_lc == "next >" && page + 1 < pages {
                    let obs = self.render_results(page + 1, &hits);
                    self.page = Page::Results {
                        query,
                        page: page + 1,
                        hits,
                    };
                    EnvObservation::new(obs)
                } else if target_lc == "< prev" && page > 0 {
                    let obs = self.render_results(page - 1, &hits);
                    self.page = Page::Results {
                        query,
                        page: page - 1,
                        hits,
                    };
                    EnvObservation::new(obs)
                } else if let Some(&item) = on_page
                    .iter()
                    .find(|&&i| self.catalog[i].id.to_lowercase() == target_lc)
                {
                    let chosen = BTreeMap::new();
                    let obs = self.render_item(item, &chosen);
                    self.page = Page::Item {
                        item,
                        chosen,
                        query,
                        page,
                        hits,
                    };
                    EnvObservation::new(obs)
                } else {
                    self.page = Page::Results { query, page, hits };
                    EnvObservation::invalid()
                }
            }
            Page::Item {
                item,
                mut chosen,
                query,
                page,
                hits,
            } => {
                if target_lc == "back to search" {
                    self.page = Page::Search;
                    return EnvObservation::new(self.render_search());
                }
                if target_lc == "< prev" {
                    let obs = self.render_results(page, &hits);
                    self.page = Page::Results { query, page, hits };
                    return EnvObservation::new(obs);
                }
                if target_lc == "buy now" {
                    self.state = EpisodeState::Done;
                    let goal = self.goal.as_ref().expect("goal set at reset");
                    let reward = shop_reward(&self.catalog[item].purchased(&chosen), goal);
                    return EnvObservation::finished(
                        format!("Thank you for shopping with us! [SEP] Your score (min 0.0, max 1.0) [SEP] {reward}"),
                        reward,
                    );
                }
                let found = self.catalog[item]
                    .options
                    .iter()
                    .find_map(|(group, values)| {
                        values
                            .iter()
                            .find(|v| v.to_lowercase() == target_lc)
                            .map(|v| (group.clone(), v.clone()))
                    });
                match found {
                    Some((group, value)) => {
                        chosen.insert(group, value);
                        let obs = self.render_item(item, &chosen);
                        self.page = Page::Item {
                            item,
                            chosen,
                            query,
                            page,
                            hits,
                        };
                        EnvObservation::new(obs)
                    }
                    None => {
                        self.page = Page::Item {
                            item,
                            chosen,
                            query,
                            page,
                            hits,
                        };
                        EnvObservation::invalid()
                    }
                }
            }
        }
    }
}

impl Environment for ShopEnv {
    fn reset(&mut self, task_id: &str) -> Result<EnvObservation> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        self.goal = Some(task.goal.clone());
        self.instruction = task.instruction.clone();
        self.page = Page::Search;
        self.state = EpisodeState::Running;
        Ok(EnvObservation::new(self.render_search()))
    }

    fn step(&mut self, action: &str) -> Result<EnvObservation> {
        self.state.check_step()?;
        let Some((verb, arg)) = parse_bracketed(action) else {
            return Ok(EnvObservation::invalid());
        };
        if arg.is_empty() {
            return Ok(EnvObservation::invalid());
        }
        Ok(match verb {
            "search" if matches!(self.page, Page::Search) => {
                let hits = self.search(arg);
                let obs = self.render_results(0, &hits);
                self.page = Page::Results {
                    query: arg.to_string(),
                    page: 0,
                    hits,
                };
                EnvObservation::new(obs)
            }
            "click" => self.click(arg),
            _ => EnvObservation::invalid(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    items: Vec<CatalogItem>,
}

pub struct ShopSuite {
    catalog: Arc<Vec<CatalogItem>>,
    by_id: Arc<HashMap<String, ShopTask>>,
    tasks: Vec<Task>,
}

impl ShopSuite {
    pub fn new(catalog: Vec<CatalogItem>, shop_tasks: Vec<ShopTask>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for item in &catalog {
            if item.price < 0.0 {
                return Err(Error::InvalidData(format!(
                    "item `{}` has a negative price",
                    item.id
                )));
            }
            if !ids.insert(item.id.to_lowercase()) {
                return Err(Error::InvalidData(format!(
                    "duplicate item id `{}`",
                    item.id
                )));
            }
        }
        let mut by_id = HashMap::new();
        let mut tasks = Vec::new();
        for t in shop_tasks {
            if t.goal.price_cap < 0.0 {
                return Err(Error::InvalidData(format!(
                    "task `{}` has a negative price cap",
                    t.id
                )));
            }
            tasks.push(Task {
                id: t.id.clone(),
                env_name: EnvKind::ToyShop.as_str().to_string(),
                description: t.instruction.clone(),
                task_type: t
                    .task_type
                    .clone()
                    .or_else(|| Some(t.goal.category.clone())),
            });
            by_id.insert(t.id.clone(), t);
        }
        crate::model::validate_tasks(&tasks)?;
        Ok(Self {
            catalog: Arc::new(catalog),
            by_id: Arc::new(by_id),
            tasks,
        })
    }

    fn parse(catalog: &str, tasks: &str) -> Result<Self> {
        let catalog: CatalogFile = serde_json::from_str(catalog)?;
        Self::new(catalog.items, serde_json::from_str(tasks)?)
    }

    pub fn builtin() -> Result<Self> {
        Self::parse(
            include_str!("../../data/envs/shop_catalog.json"),
            include_str!("../../data/envs/shop_tasks.json"),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(
            &read_data(dir, "shop_catalog.json")?,
            &read_data(dir, "shop_tasks.json")?,
        )
    }

    pub fn catalog(&self) -> &[CatalogItem] {
        &self.catalog
    }

    pub fn shop_task(&self, id: &str) -> Option<&ShopTask> {
        self.by_id.get(id)
    }
}

impl EnvFactory for ShopSuite {
    fn kind(&self) -> EnvKind {
        EnvKind::ToyShop
    }

    fn with_tasks_json(&self, json: &str) -> Result<Arc<dyn EnvFactory>> {
        Ok(Arc::new(Self::new(
            self.catalog.to_vec(),
            serde_json::from_str(json)?,
        )?))
    }

    fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    fn create(&self) -> Box<dyn Environment> {
        Box::new(self.env())
    }
}

impl ShopSuite {
    pub fn env(&self) -> ShopEnv {
        ShopEnv {
            catalog: self.catalog.clone(),
            tasks: self.by_id.clone(),
            goal: None,
            instruction: String::new(),
            page: Page::Search,
            state: EpisodeState::Idle,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn text_match_cases() {
        assert_eq!(text_match("red ceramic mug", "red ceramic mug"), 1.0);
        assert_eq!(text_match("steel kettle", "red ceramic mug"), 0.0);
        assert_eq!(
            text_match("blue ceramic mug set", "red ceramic mug"),
            2.0 / 3.0
        );
        assert_eq!(text_match("anything", ""), 0.0);
    }

    #[test]
    fn r_type_cases_in_order() {
        assert_eq!(r_type(0.0, true, true), 0.0);
        assert_eq!(r_type(0.05, false, false), 0.1);
        assert_eq!(r_type(0.05, true, true), 0.1);
        assert_eq!(r_type(0.15, true, false), 1.0);
        assert_eq!(r_type(0.15, false, true), 1.0);
        assert_eq!(r_type(0.15, false, false), 0.5);
        // The strict/inclusive boundaries: 0.1 skips the 0.1 case, 0.2 is still 0.5.
        assert_eq!(r_type(0.1, false, false), 0.5);
        assert_eq!(r_type(0.2, false, false), 0.5);
        assert_eq!(r_type(0.25, false, false), 1.0);
    }

    fn goal() -> ShopGoal {
        ShopGoal {
            required_attributes: set(&["dishwasher safe", "handle"]),
            required_options: set(&["red"]),
            price_cap: 20.0,
            goal_title: "red ceramic mug".into(),
            query_terms: vec!["mug".into()],
            category: "kitchen".into(),
        }
    }

    #[test]
    fn reward_full_match() {
        let item = ShopItem {
            title: "Red Ceramic Mug".into(),
            attributes: set(&["dishwasher safe", "handle"]),
            options: set(&["red"]),
            price: 12.0,
            category: "kitchen".into(),
        };
        assert_eq!(shop_reward(&item, &goal()), 1.0);
    }

    #[test]
    fn reward_partial_match() {
        let item = ShopItem {
            title: "red ceramic mug".into(),
            attributes: set(&["handle"]),
            options: set(&["blue"]),
            price: 25.0,
            category: "kitchen".into(),
        };
        assert_eq!(shop_reward(&item, &goal()), 0.25);
    }

    #[test]
    fn reward_zero_when_titles_disjoint() {
        let item = ShopItem {
            title: "steel kettle".into(),
            attributes: set(&["dishwasher safe", "handle"]),
            options: set(&["red"]),
            price: 5.0,
            category: "kitchen".into(),
        };
        assert_eq!(shop_reward(&item, &goal()), 0.0);
    }

    #[test]
    fn reset_shows_instruction() {
        let suite = ShopSuite::builtin().unwrap();
        let task = suite.tasks()[0].clone();
        let mut env = suite.create();
        let obs = env.reset(&task.id).unwrap();
        assert!(obs.text.contains(&task.description));
        assert!(obs.text.contains("price lower than"));
    }

    #[test]
    fn results_paginate_at_ten() {
        let suite = ShopSuite::builtin().unwrap();
        let task = suite.tasks()[0].clone();
        let mut env = suite.create();
        env.reset(&task.id).unwrap();
        // every item carries its category, so searching all categories hits the whole catalog
        let categories: BTreeSet<&str> = suite
            .catalog()
            .iter()
            .map(|i| i.category.as_str())
            .collect();
        let query = categories.into_iter().collect::<Vec<_>>().join(" ");
        let obs = env.step(&format!("search[{query}]")).unwrap();
        assert!(suite.catalog().len() > RESULTS_PER_PAGE);
        assert_eq!(obs.text.matches("[B0").count(), RESULTS_PER_PAGE);
        assert!(obs.text.contains("[Next >]"));
        let next = env.step("click[Next >]").unwrap();
        assert_eq!(
            next.text.matches("[B0").count(),
            suite.catalog().len() - RESULTS_PER_PAGE
        );
        assert!(next.text.contains("[< Prev]") && !next.text.contains("[Next >]"));
        assert!(!env.step("click[Next >]").unwrap().valid);
    }

    #[test]
    fn scripted_purchase_matches_reward() {
        let suite = ShopSuite::builtin().unwrap();
        for task in suite.tasks() {
            let spec = suite.shop_task(&task.id).unwrap();
            let mut env = suite.env();
            env.reset(&task.id).unwrap();
            assert!(!env.step("click[Buy Now]").unwrap().valid);
            env.step(&format!("search[{}]", spec.goal.goal_title))
                .unwrap();
            // first listed result, then every required option it offers
            let first = env.search(&spec.goal.goal_title)[0];
            let item = suite.catalog()[first].clone();
            env.step(&format!("click[{}]", item.id)).unwrap();
            let mut chosen = BTreeMap::new();
            for (group, values) in &item.options {
                if let Some(v) = values
                    .iter()
                    .find(|v| spec.goal.required_options.contains(*v))
                {
                    assert!(env.step(&format!("click[{v}]")).unwrap().valid);
                    chosen.insert(group.clone(), v.clone());
                }
            }
            let obs = env.step("click[Buy Now]").unwrap();
            assert!(obs.done);
            assert_eq!(
                obs.reward,
                shop_reward(&item.purchased(&chosen), &spec.goal)
            );
            assert!(env.step("click[Buy Now]").is_err());
        }
    }
}
