//! Name-keyed registries of interchangeable strategies.
//!
//! Every strategy family (CKA computation route, attention mask row, mask
//! upsampler, heatmap palette) exposes a trait; concrete variants are boxed
//! and registered under a stable name so callers can pick one at runtime.

use std::fmt;

use crate::attnmask::{Bilinear, ClassTokenRow, MaskRow, MeanRow, Nearest, Upsampler};
use crate::cka::{AutoRoute, CkaRoute, FeatureRoute, GramRoute};
use crate::imaging::{ColorStops, Palette};

/// Anything that can be registered.
pub trait Named {
    fn name(&self) -> &'static str;
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown {family} {requested:?}; available: {available}")]
pub struct UnknownStrategy {
    pub family: &'static str,
    pub requested: String,
    pub available: String,
}

pub struct Registry<T: ?Sized> {
    family: &'static str,
    entries: Vec<Box<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(family: &'static str) -> Self {
        Self {
            family,
            entries: Vec::new(),
        }
    }

    /// Adds a strategy. A later registration under an existing name replaces it.
    pub fn register(&mut self, strategy: Box<T>) -> &mut Self {
        match self
            .entries
            .iter()
            .position(|e| e.name() == strategy.name())
        {
            Some(i) => self.entries[i] = strategy,
            None => self.entries.push(strategy),
        }
        self
    }

    pub fn get(&self, name: &str) -> Result<&T, UnknownStrategy> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|b| b.as_ref())
            .ok_or_else(|| UnknownStrategy {
                family: self.family,
                requested: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

impl<T: ?Sized + Named> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("family", &self.family)
            .field("entries", &self.names())
            .finish()
    }
}

pub fn cka_routes() -> Registry<dyn CkaRoute> {
    let mut r = Registry::<dyn CkaRoute>::new("cka route");
    r.register(Box::new(AutoRoute))
        .register(Box::new(GramRoute))
        .register(Box::new(FeatureRoute));
    r
}

pub fn mask_rows() -> Registry<dyn MaskRow> {
    let mut r = Registry::<dyn MaskRow>::new("mask row");
    r.register(Box::new(ClassTokenRow))
        .register(Box::new(MeanRow));
    r
}

pub fn upsamplers() -> Registry<dyn Upsampler> {
    let mut r = Registry::<dyn Upsampler>::new("upsampler");
    r.register(Box::new(Nearest)).register(Box::new(Bilinear));
    r
}

pub fn palettes() -> Registry<dyn Palette> {
    let mut r = Registry::<dyn Palette>::new("palette");
    r.register(Box::new(ColorStops::heat()))
        .register(Box::new(ColorStops::gray()));
    r
}
