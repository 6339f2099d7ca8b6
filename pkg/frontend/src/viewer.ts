/**
 * three.js rendering of the scene descriptors: one unit-sphere mesh per
 * part, scaled by the ellipsoid radii and rotated by the eigenvector frame,
 * plus the decoded interior point cloud. Clicking an ellipsoid toggles its
 * part in the selection (reported through a callback; the viewer never
 * mutates shape data).
 */

import * as THREE from "three";

import type { EllipsoidDescriptor } from "./scene";
import { partColor } from "./scene";

export class Viewer {
  private renderer: THREE.WebGLRenderer;
  private scene = new THREE.Scene();
  private camera: THREE.PerspectiveCamera;
  private raycaster = new THREE.Raycaster();
  private partGroup = new THREE.Group();
  private pointsObj: THREE.Points | null = null;
  private dragging = false;
  private lastPointer = { x: 0, y: 0 };
  private angles = { yaw: 0.7, pitch: 0.5 };
  private distance = 3.2;

  onPartClick: ((index: number) => void) | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(
      45, canvas.clientWidth / canvas.clientHeight, 0.01, 100);
    this.scene.background = new THREE.Color("#16181d");
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));
    const sun = new THREE.DirectionalLight(0xffffff, 1.1);
    sun.position.set(2, 3, 4);
    this.scene.add(sun);
    this.scene.add(new THREE.AxesHelper(0.5));
    this.scene.add(this.partGroup);
    this.updateCamera();

    canvas.addEventListener("pointerdown", (e) => {
      this.dragging = true;
      this.lastPointer = { x: e.clientX, y: e.clientY };
    });
    window.addEventListener("pointerup", () => (this.dragging = false));
    window.addEventListener("pointermove", (e) => {
      if (!this.dragging) return;
      this.angles.yaw -= (e.clientX - this.lastPointer.x) * 0.008;
      this.angles.pitch = Math.min(
        1.5, Math.max(-1.5,
          this.angles.pitch + (e.clientY - this.lastPointer.y) * 0.008));
      this.lastPointer = { x: e.clientX, y: e.clientY };
      this.updateCamera();
      this.render();
    });
    canvas.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.distance = Math.min(12, Math.max(0.5,
        this.distance * (1 + e.deltaY * 0.001)));
      this.updateCamera();
      this.render();
    });
    canvas.addEventListener("click", (e) => this.pick(e));
  }

  private updateCamera(): void {
    const { yaw, pitch } = this.angles;
    const r = this.distance;
    this.camera.position.set(
      r * Math.cos(pitch) * Math.cos(yaw),
      r * Math.cos(pitch) * Math.sin(yaw),
      r * Math.sin(pitch) + 0.4,
    );
    this.camera.up.set(0, 0, 1);          // world is z-up
    this.camera.lookAt(0, 0, 0.4);
  }

  private pick(e: MouseEvent): void {
    if (!this.onPartClick) return;
    const rect = this.canvas.getBoundingClientRect();
    const ndc = new THREE.Vector2(
      ((e.clientX - rect.left) / rect.width) * 2 - 1,
      -((e.clientY - rect.top) / rect.height) * 2 + 1,
    );
    this.raycaster.setFromCamera(ndc, this.camera);
    const hits = this.raycaster.intersectObjects(this.partGroup.children);
    if (hits.length > 0) {
      const idx = hits[0].object.userData.partIndex as number;
      this.onPartClick(idx);
    }
  }

  setParts(parts: EllipsoidDescriptor[]): void {
    this.partGroup.clear();
    for (const d of parts) {
      const geo = new THREE.SphereGeometry(1, 24, 16);
      const mat = new THREE.MeshStandardMaterial({
        color: partColor(d),
        transparent: true,
        opacity: d.selected ? 0.85 : 0.45,
        roughness: 0.4,
      });
      const mesh = new THREE.Mesh(geo, mat);
      mesh.userData.partIndex = d.index;
      const m = d.rotation;
      const basis = new THREE.Matrix4().set(
        m[0], m[1], m[2], 0,
        m[3], m[4], m[5], 0,
        m[6], m[7], m[8], 0,
        0, 0, 0, 1,
      );
      mesh.setRotationFromMatrix(basis);
      mesh.scale.set(...d.radii);
      mesh.position.set(...d.center);
      this.partGroup.add(mesh);
    }
    this.render();
  }

  setPoints(points: number[][]): void {
    if (this.pointsObj) this.scene.remove(this.pointsObj);
    const flat = new Float32Array(points.length * 3);
    points.forEach((p, i) => flat.set(p, i * 3));
    const geo = new THREE.BufferGeometry();
    geo.setAttribute("position", new THREE.BufferAttribute(flat, 3));
    const mat = new THREE.PointsMaterial({ color: "#e8eaf0", size: 0.012 });
    this.pointsObj = new THREE.Points(geo, mat);
    this.scene.add(this.pointsObj);
    this.render();
  }

  resize(width: number, height: number): void {
    this.renderer.setSize(width, height, false);
    this.camera.aspect = width / height;
    this.camera.updateProjectionMatrix();
    this.render();
  }

  render(): void {
    this.renderer.render(this.scene, this.camera);
  }
}
