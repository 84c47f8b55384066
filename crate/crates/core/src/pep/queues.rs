use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::model::{Discipline, PerPriority, PriorityLevel};

pub type QueueLengths = PerPriority<usize>;

/// Returned by [`PriorityQueues::enqueue`] with the rejected item.
#[derive(Debug)]
pub struct QueueFull<T>(pub T);

#[derive(Debug)]
struct Slot<T> {
    item: T,
    finish: f64,
}

/// One bounded FIFO per priority plus self-clocked WFQ bookkeeping.
///
/// Every request costs one unit of service, so a queue with weight `w`
/// advances its finish tag by `1/w` per request. The system virtual time is
/// the finish tag of the last dispatched request.
#[derive(Debug)]
pub struct PriorityQueues<T> {
    queues: PerPriority<VecDeque<Slot<T>>>,
    capacity: usize,
    virtual_time: f64,
    last_finish: PerPriority<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub lengths: QueueLengths,
    pub virtual_time: f64,
}

impl<T> PriorityQueues<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            queues: PerPriority::default(),
            capacity,
            virtual_time: 0.0,
            last_finish: PerPriority::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn lengths(&self) -> QueueLengths {
        self.queues.map(|_, q| q.len())
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(|(_, q)| q.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends to the FIFO of `priority`, tagging the item with its WFQ finish
    /// time under `weights`.
    pub fn enqueue(
        &mut self,
        priority: PriorityLevel,
        item: T,
        weights: &PerPriority<u32>,
    ) -> Result<(), QueueFull<T>> {
        if self.queues.get(priority).len() >= self.capacity {
            return Err(QueueFull(item));
        }
        let weight = f64::from((*weights.get(priority)).max(1));
        let last = self.last_finish.get_mut(priority);
        let start = last.max(self.virtual_time);
        let finish = start + 1.0 / weight;
        *last = finish;
        self.queues
            .get_mut(priority)
            .push_back(Slot { item, finish });
        Ok(())
    }

    /// Next request under `discipline`, or `None` when every queue is empty.
    pub fn dispatch(&mut self, discipline: Discipline) -> Option<(PriorityLevel, T)> {
        let priority = match discipline {
            Discipline::PriorityFirst => PriorityLevel::ALL
                .into_iter()
                .find(|p| !self.queues.get(*p).is_empty())?,
            Discipline::Wfq => {
                let mut best: Option<(PriorityLevel, f64)> = None;
                // ALL is highest first, so strict `<` breaks ties toward higher priority.
                for p in PriorityLevel::ALL {
                    if let Some(head) = self.queues.get(p).front() {
                        if best.is_none_or(|(_, f)| head.finish < f) {
                            best = Some((p, head.finish));
                        }
                    }
                }
                best?.0
            }
        };
        let slot = self.queues.get_mut(priority).pop_front()?;
        self.virtual_time = self.virtual_time.max(slot.finish);
        Some((priority, slot.item))
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            lengths: self.lengths(),
            virtual_time: self.virtual_time,
        }
    }
}
