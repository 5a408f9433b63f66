#!/usr/bin/env python3
"""End-to-end walkthrough: educator builds a challenge, student solves it.

Runs entirely in a scratch directory with small (36 MiB) images so it
finishes in seconds. Mirrors the CLI flow:

    eviforge fixture ... / diff ... / inspect ... / inject ... / verify ...

but drives the Python API directly so each step's objects are visible.
"""

import os
import shutil
import tempfile
from datetime import datetime

from eviforge import diffing, imgfs, inject, package
from eviforge.compose import build_chain, compose, reconstruct, retarget_time

workdir = tempfile.mkdtemp(prefix="eviforge-demo-")
print(f"working in {workdir}\n")


def path(name):
    return os.path.join(workdir, name)


# -- 1. the educator creates and distributes a base image (once) -------------

size = 36 * 1024 * 1024
base_img = imgfs.create_image(path("base.img"), size)
part = imgfs.PartitionEntry(index=0, start_lba=2048,
                            sector_count=size // 512 - 2048,
                            type_code=0x0C, bootable=False)
imgfs.write_mbr(base_img, [part])
vol = imgfs.format_fixture(base_img, part, cluster_size=512, label="CLASSBASE")
stamp = imgfs.FileMeta(mtime=datetime(2017, 1, 10, 9, 0, 0))
vol.write_file("/os/boot.cfg", b"boot-order=disk\n", stamp)
vol.write_file("/users/alice/notes.txt", b"meeting at nine\n", stamp)
base_img.close()
print(f"base image ready: {os.path.getsize(path('base.img')) // 2**20} MiB")

# -- 2. the educator emulates a crime on a copy ------------------------------

imgfs.sparse_copy(path("base.img"), path("modified.img"))
mod_img = imgfs.open_image(path("modified.img"), "rw")
mod_vol = imgfs.mount_volume(mod_img, imgfs.parse_partitions(mod_img)[0])
crime_time = imgfs.FileMeta(mtime=datetime(2017, 1, 26, 23, 41, 12),
                            ctime=datetime(2017, 1, 26, 23, 41, 12),
                            attrs=imgfs.FileAttrs.HIDDEN)
mod_vol.write_file("/users/alice/.stash/clients.csv",
                   b"name,account\nmallory,4242\n", crime_time)
mod_vol.write_file("/users/alice/notes.txt",
                   b"meeting at nine\nburn the evidence\n", crime_time)
mod_vol.delete_entry("/os/boot.cfg")
log = b"2017-01-26T23:40:00 usb device attached\n2017-01-26T23:41:30 file copied\n"
mod_vol.write_file("/os/events.log", log, crime_time)
mod_img.flush()

# -- 3. diffing extracts an evidence package ---------------------------------

base_ro = imgfs.open_image(path("base.img"), "ro")
report = diffing.diff_images(base_ro, mod_img)
print(f"diff found {len(report.artifacts)} artifacts: {report.stats['counts']}")

answer_key = package.AnswerKey(scenario="Alice exfiltrated a client list late at night.")
for artifact in report.artifacts:
    if artifact.path and "clients.csv" in artifact.path:
        answer_key.entries.append(package.AnswerKeyEntry(
            artifact.artifact_id, "the exfiltrated client list", pertinent=True))

pkg = package.build_package(report, labels={"crime", "demo"}, answer_key=answer_key)
for artifact in pkg.artifacts:
    if artifact.path == "/os/events.log":
        artifact.handler = "text-log-iso8601"  # reversed artifact: format understood
package.write_package(pkg, path("challenge.evpkg"))
stats = package.package_stats(pkg)
print(f"package: {stats.container_bytes} bytes vs {size} byte image "
      f"(ratio {stats.ratio:.5f})\n")

# -- 4. optional manipulation: shift the whole story one week later ----------

shifted = retarget_time(pkg, 7 * 86400)
moved = next(a for a in shifted.artifacts if a.path == "/os/events.log")
print("retargeted log now begins:",
      shifted.blobs[moved.content_ref].decode().splitlines()[0])

# -- 5. the student plants the package into their own base copy --------------

student_pkg = package.strip_answer_key(pkg)  # students get no answers
package.write_package(student_pkg, path("student.evpkg"))

imgfs.sparse_copy(path("base.img"), path("student.img"))
student_img = imgfs.open_image(path("student.img"), "rw")
outcome = inject.inject_physical(student_img, student_pkg)
assert outcome.output_image_hash == mod_img.content_hash
print("physical injection reproduced the educator's image byte for byte")

verdict = inject.verify_injection(student_img, student_pkg)
print(f"verification: {sum(c.passed for c in verdict.checks)}/{len(verdict.checks)} "
      "artifacts recovered\n")

# -- 6. story mode: combine two packages, last one wins ----------------------

imgfs.sparse_copy(path("base.img"), path("wear.img"))
wear_img = imgfs.open_image(path("wear.img"), "rw")
wear_vol = imgfs.mount_volume(wear_img, imgfs.parse_partitions(wear_img)[0])
wear_vol.write_file("/users/alice/browser.history", b"cats, recipes, maps\n",
                    imgfs.FileMeta(mtime=datetime(2017, 1, 20, 12, 0, 0)))
wear_img.flush()
wear_pkg = package.build_package(diffing.diff_images(base_ro, wear_img),
                                 labels={"wear-and-tear"})
story = compose([wear_pkg, pkg])
imgfs.sparse_copy(path("base.img"), path("story.img"))
story_img = imgfs.open_image(path("story.img"), "rw")
inject.inject_physical(story_img, story)
print(f"story package merges {len(story.artifacts)} artifacts from two sources; "
      f"provenance tracked for {len(story.provenance)} of them")

# -- 7. timeline: snapshot chain and point-in-time reconstruction ------------

snapshots = [path("base.img"), path("wear.img"), path("modified.img")]
chain = build_chain([imgfs.open_image(s, "ro") for s in snapshots])
mid = reconstruct(imgfs.open_image(path("base.img"), "ro"), chain, 1, path("t1.img"))
assert mid.content_hash == imgfs.open_image(path("wear.img"), "ro").content_hash
print("chain reconstruction recovered snapshot 1 exactly")

shutil.rmtree(workdir)
print("\ndemo finished cleanly")
