//! The image catalog and the admission rules for images.

use std::collections::BTreeMap;

use parking_lot::RwLock;

use crate::model::{VmId, VmImage};

pub const DEFAULT_SHARE_PREFIX: &str = "/mnt/vitl-share/";

const MAX_OS_NAME: usize = 30;
const MAX_VMX_PATH: usize = 100;
const MAX_DISPLAY_NAME: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("image {0} already exists in the catalog")]
    Duplicate(VmId),
    #[error("image {vm_id} is not servable: {}", violations.join("; "))]
    NotServable { vm_id: VmId, violations: Vec<String> },
    #[error("catalog seed line {line}: {message}")]
    Seed { line: usize, message: String },
}

/// Validates an image against the default shared-mount prefix.
pub fn validate_image(image: &VmImage) -> Vec<String> {
    validate_image_with_prefix(image, DEFAULT_SHARE_PREFIX)
}

/// Returns one violation per unset checklist flag and per structural breach.
/// An empty list means the image is servable.
pub fn validate_image_with_prefix(image: &VmImage, share_prefix: &str) -> Vec<String> {
    let mut violations = Vec::new();
    if image.vm_id.0 == 0 {
        violations.push("vm_id must be positive".to_string());
    }
    if image.os_name.trim().is_empty() {
        violations.push("os_name is empty".to_string());
    } else if image.os_name.chars().count() > MAX_OS_NAME {
        violations.push(format!("os_name longer than {MAX_OS_NAME} characters"));
    }
    if image.clone_vmx_path.is_empty() {
        violations.push("clone_vmx_path is empty".to_string());
    } else {
        if !image.clone_vmx_path.starts_with(share_prefix) {
            violations.push(format!("clone_vmx_path does not start with {share_prefix}"));
        }
        if image.clone_vmx_path.chars().count() > MAX_VMX_PATH {
            violations.push(format!("clone_vmx_path longer than {MAX_VMX_PATH} characters"));
        }
    }
    if image.display_name.chars().count() > MAX_DISPLAY_NAME {
        violations.push(format!("display_name longer than {MAX_DISPLAY_NAME} characters"));
    }
    violations.extend(
        image
            .preconfig
            .items()
            .into_iter()
            .filter(|(ok, _)| !ok)
            .map(|(_, msg)| msg.to_string()),
    );
    violations
}

/// Parses a line-delimited catalog seed: one JSON object per line, blank
/// lines and `#` comments ignored.
pub fn parse_seed(text: &str) -> Result<Vec<VmImage>, CatalogError> {
    let mut images = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let image: VmImage = serde_json::from_str(line).map_err(|e| CatalogError::Seed {
            line: idx + 1,
            message: e.to_string(),
        })?;
        images.push(image);
    }
    Ok(images)
}

/// Concurrent-read, serialized-write image catalog keyed by `vm_id`.
#[derive(Debug)]
pub struct Catalog {
    share_prefix: String,
    images: RwLock<BTreeMap<VmId, VmImage>>,
}

impl Default for Catalog {
    fn default() -> Self {
        Self::new(DEFAULT_SHARE_PREFIX)
    }
}

impl Catalog {
    pub fn new(share_prefix: impl Into<String>) -> Self {
        Self {
            share_prefix: share_prefix.into(),
            images: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn share_prefix(&self) -> &str {
        &self.share_prefix
    }

    pub fn validate(&self, image: &VmImage) -> Vec<String> {
        validate_image_with_prefix(image, &self.share_prefix)
    }

    /// Admits a servable image; duplicates and invalid images are rejected.
    pub fn insert(&self, image: VmImage) -> Result<(), CatalogError> {
        let violations = self.validate(&image);
        if !violations.is_empty() {
            return Err(CatalogError::NotServable {
                vm_id: image.vm_id,
                violations,
            });
        }
        let mut images = self.images.write();
        if images.contains_key(&image.vm_id) {
            return Err(CatalogError::Duplicate(image.vm_id));
        }
        images.insert(image.vm_id, image);
        Ok(())
    }

    /// Inserts every image or none.
    pub fn insert_all(&self, batch: Vec<VmImage>) -> Result<usize, CatalogError> {
        let mut images = self.images.write();
        let mut seen = std::collections::BTreeSet::new();
        for image in &batch {
            let violations = self.validate(image);
            if !violations.is_empty() {
                return Err(CatalogError::NotServable {
                    vm_id: image.vm_id,
                    violations,
                });
            }
            if images.contains_key(&image.vm_id) || !seen.insert(image.vm_id) {
                return Err(CatalogError::Duplicate(image.vm_id));
            }
        }
        let n = batch.len();
        for image in batch {
            images.insert(image.vm_id, image);
        }
        Ok(n)
    }

    pub fn remove(&self, vm_id: VmId) -> Option<VmImage> {
        self.images.write().remove(&vm_id)
    }

    pub fn lookup(&self, vm_id: VmId) -> Option<VmImage> {
        self.images.read().get(&vm_id).cloned()
    }

    pub fn list(&self) -> Vec<VmImage> {
        self.images.read().values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.images.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces the whole catalog contents (used when restoring persisted state).
    pub fn replace_all(&self, batch: Vec<VmImage>) {
        let mut images = self.images.write();
        images.clear();
        images.extend(batch.into_iter().map(|i| (i.vm_id, i)));
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{OsFamily, PreconfigChecklist};

    pub(crate) fn image(id: u32, name: &str) -> VmImage {
        VmImage {
            vm_id: VmId(id),
            os_name: name.to_string(),
            clone_vmx_path: format!("{DEFAULT_SHARE_PREFIX}{name}/clone.vmx"),
            os_family: OsFamily::Linux,
            display_name: format!("{name} desktop"),
            preconfig: PreconfigChecklist::complete(),
        }
    }

    #[test]
    fn fully_configured_image_is_valid() {
        assert!(validate_image(&image(1, "ubuntu")).is_empty());
    }

    #[test]
    fn single_false_flag_is_single_violation() {
        let mut img = image(1, "xp");
        img.preconfig.autologin_set = false;
        assert_eq!(validate_image(&img), vec!["autologin not set".to_string()]);
    }

    #[test]
    fn violations_count_flags_and_structure() {
        let mut img = image(1, "xp");
        img.preconfig.autologin_set = false;
        img.preconfig.firewall_configured = false;
        img.clone_vmx_path.clear();

        // independent count: unset flags plus structural breaches
        let false_flags = [
            img.preconfig.autologin_set,
            img.preconfig.remote_server_installed,
            img.preconfig.firewall_configured,
            img.preconfig.guest_tools_installed,
            img.preconfig.screensaver_off,
            img.preconfig.auto_updates_off,
        ]
        .iter()
        .filter(|f| !**f)
        .count();
        let structural = usize::from(img.clone_vmx_path.is_empty());
        let violations = validate_image(&img);
        assert_eq!(violations.len(), false_flags + structural);
        assert_eq!(violations.len(), 3);
        assert_eq!(violations, validate_image(&img));
    }

    #[test]
    fn path_outside_share_is_rejected() {
        let mut img = image(4, "mac");
        img.clone_vmx_path = "/home/user/mac.vmx".to_string();
        assert_eq!(validate_image(&img).len(), 1);
        let catalog = Catalog::new("/home/user/");
        assert!(catalog.validate(&img).is_empty());
    }

    #[test]
    fn lookup_hits_misses_and_removal() {
        let catalog = Catalog::default();
        catalog.insert(image(1, "xp")).unwrap();
        catalog.insert(image(2, "ubuntu")).unwrap();
        assert_eq!(catalog.lookup(VmId(2)).unwrap().os_name, "ubuntu");
        assert!(catalog.lookup(VmId(99)).is_none());

        catalog.insert(image(3, "fedora")).unwrap();
        assert!(catalog.remove(VmId(3)).is_some());
        assert!(catalog.lookup(VmId(3)).is_none());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let catalog = Catalog::default();
        catalog.insert(image(1, "xp")).unwrap();
        assert_eq!(
            catalog.insert(image(1, "xp-64")),
            Err(CatalogError::Duplicate(VmId(1)))
        );
        assert_eq!(catalog.len(), 1);
    }

    #[test]
    fn unservable_image_is_not_admitted() {
        let catalog = Catalog::default();
        let mut img = image(1, "xp");
        img.preconfig.screensaver_off = false;
        assert!(matches!(
            catalog.insert(img),
            Err(CatalogError::NotServable { .. })
        ));
        assert!(catalog.is_empty());
    }

    #[test]
    fn batch_insert_is_all_or_nothing() {
        let catalog = Catalog::default();
        let err = catalog.insert_all(vec![image(1, "a"), image(2, "b"), image(1, "c")]);
        assert_eq!(err, Err(CatalogError::Duplicate(VmId(1))));
        assert!(catalog.is_empty());
        assert_eq!(catalog.insert_all(vec![image(1, "a"), image(2, "b")]), Ok(2));
    }

    #[test]
    fn seed_file_uses_type_field_names() {
        let text = r#"
# id 1
{"vm_id":1,"os_name":"WinXP","clone_vmx_path":"/mnt/vitl-share/xp/xp.vmx","os_family":"WIN","display_name":"Windows XP","autologin_set":true,"remote_server_installed":true,"firewall_configured":true,"guest_tools_installed":true,"screensaver_off":true,"auto_updates_off":true}
{"vm_id":2,"os_name":"Solaris","clone_vmx_path":"/mnt/vitl-share/sol/sol.vmx","os_family":"OPEN SOLARIS","display_name":"OpenSolaris","autologin_set":true,"remote_server_installed":true,"firewall_configured":true,"guest_tools_installed":true,"screensaver_off":true,"auto_updates_off":false}
"#;
        let images = parse_seed(text).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[1].os_family, crate::model::OsFamily::OpenSolaris);
        assert!(!images[1].preconfig.auto_updates_off);

        let line = serde_json::to_string(&images[0]).unwrap();
        assert!(line.starts_with(r#"{"vm_id":1,"os_name":"WinXP","clone_vmx_path""#));

        let bad = "{\"vm_id\":1}\n";
        assert!(matches!(parse_seed(bad), Err(CatalogError::Seed { line: 1, .. })));
    }
}
