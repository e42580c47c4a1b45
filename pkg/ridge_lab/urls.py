"""
URL configuration for ridge_lab project.

The lab is driven from ``manage.py lab``; the web side only browses the
campaigns recorded by that command.
"""
from django.contrib import admin
from django.urls import path
from ridgeapp import views

urlpatterns = [
    path('admin/', admin.site.urls),
    path('', views.run_list, name='run_list'),
    path('runs/<int:run_id>/', views.run_detail, name='run_detail'),
]
