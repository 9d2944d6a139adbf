use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPhase {
    TaskStart,
    AfterSynthesis,
    TaskEnd,
}

/// Cross-task state held at one point in a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEvent {
    pub task: usize,
    pub phase: MemoryPhase,
    pub model_params: usize,
    pub snapshots: usize,
    pub snapshot_params: usize,
    pub generators: usize,
    pub generator_params: usize,
    pub coreset_images: usize,
}

/// Record of what the trainer keeps alive across and within tasks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub events: Vec<MemoryEvent>,
}

impl MemoryLedger {
    pub fn record(&mut self, event: MemoryEvent) {
        self.events.push(event);
    }

    pub fn peak_snapshots(&self) -> usize {
        self.events.iter().map(|e| e.snapshots).max().unwrap_or(0)
    }

    pub fn peak_generators(&self) -> usize {
        self.events.iter().map(|e| e.generators).max().unwrap_or(0)
    }

    /// True if a generator is still held when some task ends.
    pub fn generator_outlives_task(&self) -> bool {
        self.events
            .iter()
            .any(|e| e.phase == MemoryPhase::TaskEnd && e.generators > 0)
    }

    /// Largest total parameter count held at once.
    pub fn peak_params(&self) -> usize {
        self.events
            .iter()
            .map(|e| e.model_params + e.snapshot_params + e.generator_params)
            .max()
            .unwrap_or(0)
    }
}
