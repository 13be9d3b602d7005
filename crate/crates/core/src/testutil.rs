pub(crate) use crate::simulate::{random_instance, InstanceShape};
