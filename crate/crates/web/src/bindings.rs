use wasm_bindgen::prelude::*;

use crate::demo::{explain_decision, ToyDemo};

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js)
}

/// JavaScript handle on a [`ToyDemo`]. Structured results are JSON strings.
#[wasm_bindgen]
pub struct WebDemo {
    inner: ToyDemo,
}

#[wasm_bindgen]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, epochs_per_task: u32) -> Result<WebDemo, JsError> {
        let inner = ToyDemo::new(seed as u64, epochs_per_task.max(1) as usize).map_err(js)?;
        Ok(WebDemo { inner })
    }

    #[wasm_bindgen(js_name = numTasks)]
    pub fn num_tasks(&self) -> usize {
        self.inner.num_tasks()
    }

    /// Metrics of the epoch just trained, or `null` when finished.
    pub fn step(&mut self) -> Result<Option<String>, JsError> {
        match self.inner.step().map_err(js)? {
            Some(info) => json(&info).map(Some),
            None => Ok(None),
        }
    }

    #[wasm_bindgen(js_name = testXY)]
    pub fn test_xy(&self) -> Result<Vec<f64>, JsError> {
        Ok(self.inner.test_points().map_err(js)?.0)
    }

    #[wasm_bindgen(js_name = testLabels)]
    pub fn test_labels(&self) -> Result<Vec<u32>, JsError> {
        Ok(self
            .inner
            .test_points()
            .map_err(js)?
            .1
            .into_iter()
            .map(|c| c as u32)
            .collect())
    }

    #[wasm_bindgen(js_name = replayXY)]
    pub fn replay_xy(&self) -> Vec<f64> {
        self.inner.replay_points().0
    }

    #[wasm_bindgen(js_name = replayLabels)]
    pub fn replay_labels(&self) -> Vec<u32> {
        self.inner
            .replay_points()
            .1
            .into_iter()
            .map(|c| c as u32)
            .collect()
    }

    /// Predicted class per grid cell, row-major from the lower-left corner.
    #[wasm_bindgen(js_name = decisionGrid)]
    pub fn decision_grid(
        &self,
        nx: usize,
        ny: usize,
        x0: f64,
        x1: f64,
        y0: f64,
        y1: f64,
    ) -> Result<Vec<u32>, JsError> {
        let grid = self
            .inner
            .decision_grid(nx, ny, [x0, x1, y0, y1])
            .map_err(js)?;
        Ok(grid.into_iter().map(|c| c as u32).collect())
    }

    pub fn masks(&self) -> Result<String, JsError> {
        json(&self.inner.masks().map_err(js)?)
    }
}

/// Applies the two-head decision rule to probability tables given as
/// arrays; returns the explanation as JSON.
#[wasm_bindgen]
pub fn decide(p_a: Vec<f64>, p_b: Vec<f64>) -> Result<String, JsError> {
    json(&explain_decision(&p_a, &p_b).map_err(js)?)
}
