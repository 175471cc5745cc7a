/** three.js viewport: one mesh per color group plus a translucent
 * denoising preview, with a small built-in orbit control. */

import * as THREE from "three";
import type { MeshData } from "./mesher.js";
import { greedyMesh } from "./mesher.js";
import type { Grid, Rgb, SceneObject } from "./scene.js";

export class VoxelView {
  private renderer: THREE.WebGLRenderer;
  private scene = new THREE.Scene();
  private camera: THREE.PerspectiveCamera;
  private groupRoot = new THREE.Group();
  private previewMesh: THREE.Mesh | null = null;
  private yaw = 0.7;
  private pitch = 0.5;
  private dist = 70;
  private sceneEdge = 32;
  private disposed = false;

  constructor(private container: HTMLElement) {
    this.renderer = new THREE.WebGLRenderer({ antialias: true });
    this.renderer.setPixelRatio(window.devicePixelRatio || 1);
    this.container.appendChild(this.renderer.domElement);
    this.scene.background = new THREE.Color(0x101418);
    this.camera = new THREE.PerspectiveCamera(45, 1, 0.1, 1000);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));
    const sun = new THREE.DirectionalLight(0xffffff, 1.4);
    sun.position.set(1, 2, 1.5);
    this.scene.add(sun);
    const fill = new THREE.DirectionalLight(0x8899bb, 0.5);
    fill.position.set(-1.5, -0.5, -1);
    this.scene.add(fill);
    this.scene.add(this.groupRoot);
    const floor = new THREE.GridHelper(64, 16, 0x334455, 0x223344);
    floor.position.y = -this.sceneEdge / 2 - 0.5;
    this.scene.add(floor);

    this.attachOrbit();
    this.resize();
    window.addEventListener("resize", () => this.resize());
    const tick = () => {
      if (this.disposed) return;
      this.updateCamera();
      this.renderer.render(this.scene, this.camera);
      requestAnimationFrame(tick);
    };
    requestAnimationFrame(tick);
  }

  /** Replace all placed-object meshes. Coordinates are voxel indices;
   * the root group recenters them around the origin. */
  setGroups(groups: SceneObject[], sceneEdge: number): void {
    this.sceneEdge = sceneEdge;
    for (const child of [...this.groupRoot.children]) {
      this.groupRoot.remove(child);
      disposeMesh(child);
    }
    for (const g of groups) {
      const mesh = buildMesh(greedyMesh(g.grid), g.color, 1.0);
      this.groupRoot.add(mesh);
    }
    const half = sceneEdge / 2;
    this.groupRoot.position.set(-half, -half, -half);
  }

  /** Translucent sneak peek of the object being denoised; previews are
   * decimated so scale them back up to scene size. */
  setPreview(grid: Grid | null, color: Rgb): void {
    if (this.previewMesh) {
      this.scene.remove(this.previewMesh);
      disposeMesh(this.previewMesh);
      this.previewMesh = null;
    }
    if (!grid) return;
    const scale = this.sceneEdge / grid.dims[0];
    const mesh = buildMesh(greedyMesh(grid), color, 0.45);
    mesh.scale.setScalar(scale);
    const half = this.sceneEdge / 2;
    mesh.position.set(-half, -half, -half);
    this.previewMesh = mesh;
    this.scene.add(mesh);
  }

  dispose(): void {
    this.disposed = true;
    this.renderer.dispose();
  }

  private attachOrbit(): void {
    const el = this.renderer.domElement;
    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    el.addEventListener("pointerdown", (e) => {
      dragging = true;
      lastX = e.clientX;
      lastY = e.clientY;
      el.setPointerCapture(e.pointerId);
    });
    el.addEventListener("pointerup", () => (dragging = false));
    el.addEventListener("pointermove", (e) => {
      if (!dragging) return;
      this.yaw -= (e.clientX - lastX) * 0.008;
      this.pitch += (e.clientY - lastY) * 0.008;
      this.pitch = Math.max(-1.4, Math.min(1.4, this.pitch));
      lastX = e.clientX;
      lastY = e.clientY;
    });
    el.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.dist *= Math.exp(e.deltaY * 0.001);
      this.dist = Math.max(10, Math.min(300, this.dist));
    });
  }

  private updateCamera(): void {
    const cp = Math.cos(this.pitch);
    this.camera.position.set(
      this.dist * cp * Math.sin(this.yaw),
      this.dist * Math.sin(this.pitch),
      this.dist * cp * Math.cos(this.yaw),
    );
    this.camera.lookAt(0, 0, 0);
  }

  private resize(): void {
    const w = this.container.clientWidth || 640;
    const h = this.container.clientHeight || 480;
    this.renderer.setSize(w, h, false);
    this.camera.aspect = w / h;
    this.camera.updateProjectionMatrix();
  }
}

function buildMesh(data: MeshData, color: Rgb, opacity: number): THREE.Mesh {
  const geo = new THREE.BufferGeometry();
  geo.setAttribute("position", new THREE.BufferAttribute(data.positions, 3));
  geo.setAttribute("normal", new THREE.BufferAttribute(data.normals, 3));
  geo.setIndex(new THREE.BufferAttribute(data.indices, 1));
  const mat = new THREE.MeshLambertMaterial({
    color: new THREE.Color(color[0], color[1], color[2]),
    transparent: opacity < 1,
    opacity,
  });
  return new THREE.Mesh(geo, mat);
}

function disposeMesh(obj: THREE.Object3D): void {
  if (obj instanceof THREE.Mesh) {
    obj.geometry.dispose();
    const m = obj.material;
    if (Array.isArray(m)) m.forEach((x) => x.dispose());
    else m.dispose();
  }
}
