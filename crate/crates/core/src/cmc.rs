//! Classification and marking of incoming requests.
//!
//! A marked request (or any request while the component is deactivated) goes
//! straight to the forwarder. An unmarked one is classified by the first
//! matching rule and stamped with the priority of its class.

use std::sync::Arc;

use http::HeaderValue;

use crate::model::{
    ClassificationPolicy, CmcPolicy, MarkingPolicy, TaggedRequest, CMC_CLASS_HEADER,
};

#[derive(Debug, Clone)]
pub struct CmcState {
    pub activated: bool,
    pub policy: Arc<CmcPolicy>,
    /// Address of the PEP, or of the gateway when QoS management is off.
    pub next_hop: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    ToClassifier,
    ToForwarder,
}

pub fn receive(req: &TaggedRequest, state: &CmcState) -> Route {
    if req.priority().is_some() || !state.activated {
        Route::ToForwarder
    } else {
        Route::ToClassifier
    }
}

pub fn classify<'a>(req: &TaggedRequest, policy: &'a ClassificationPolicy) -> &'a str {
    policy
        .rules
        .iter()
        .find(|r| r.matches(req))
        .map(|r| r.class.as_str())
        .unwrap_or(policy.default_class.as_str())
}

pub fn mark(req: TaggedRequest, class_name: &str, marking: &MarkingPolicy) -> TaggedRequest {
    req.with_priority(marking.priority_for(class_name))
}

/// Outcome of running a request through receiver, classifier and marker.
#[derive(Debug, Clone)]
pub struct Marked {
    pub request: TaggedRequest,
    /// Class assigned by this pass; `None` when the request bypassed the classifier.
    pub class: Option<String>,
}

/// Receiver → (classifier → marker)? → forwarder-ready request.
pub fn process(req: TaggedRequest, state: &CmcState) -> Marked {
    match receive(&req, state) {
        Route::ToForwarder => Marked {
            request: req,
            class: None,
        },
        Route::ToClassifier => {
            let class = classify(&req, &state.policy.classification).to_string();
            let mut request = mark(req, &class, &state.policy.marking);
            if let Ok(v) = HeaderValue::from_str(&class) {
                request.set_header(http::HeaderName::from_static(CMC_CLASS_HEADER), v);
            }
            Marked {
                request,
                class: Some(class),
            }
        }
    }
}
