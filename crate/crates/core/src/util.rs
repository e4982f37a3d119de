use std::fs;
use std::io;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Replaces a file by rename so a concurrent reader never sees a partial one.
/// Unchanged content is left alone.
pub fn replace_file(path: &Path, body: &[u8], mode: Option<u32>) -> io::Result<()> {
    if fs::read(path).is_ok_and(|b| b == body) {
        return Ok(());
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, body)?;
    #[cfg(unix)]
    if let Some(mode) = mode {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&tmp, fs::Permissions::from_mode(mode))?;
    }
    fs::rename(&tmp, path)
}

/// Writes an executable file.
pub fn write_script(path: &Path, body: &str) -> io::Result<()> {
    replace_file(path, body.as_bytes(), Some(0o755))
}

/// Hex SHA-256 over NUL-separated parts.
pub fn digest_parts<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.into_iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}
